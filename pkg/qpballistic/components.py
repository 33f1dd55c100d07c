import json
from typing import Annotated, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, PlainSerializer, PlainValidator, model_validator

__all__ = ["Component", "RealArray", "ComplexArray", "IntArray"]


def _coerce(dtype):
    def coerce(value: Any) -> np.ndarray:
        if dtype is not complex and np.iscomplexobj(value):
            raise ValueError("Expected real values")
        try:
            return np.array(value, dtype=dtype, copy=True)
        except (TypeError, OverflowError) as e:
            raise ValueError(str(e))

    return coerce


def _dump_complex(array: np.ndarray) -> dict:
    return {"re": array.real.tolist(), "im": array.imag.tolist()}


RealArray = Annotated[
    np.ndarray,
    PlainValidator(_coerce(float)),
    PlainSerializer(lambda a: a.tolist(), when_used="json"),
]
ComplexArray = Annotated[
    np.ndarray,
    PlainValidator(_coerce(complex)),
    PlainSerializer(_dump_complex, when_used="json"),
]
IntArray = Annotated[
    np.ndarray,
    PlainValidator(_coerce(np.int64)),
    PlainSerializer(lambda a: a.tolist(), when_used="json"),
]


class Component(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="after")
    def freeze_arrays(self) -> Any:
        for field_name in type(self).model_fields:
            value = getattr(self, field_name)
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, np.ndarray):
                        item.setflags(write=False)
        return self

    def build(self) -> dict:
        return json.loads(self.model_dump_json(by_alias=True, exclude_none=True))
