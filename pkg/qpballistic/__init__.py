from qpballistic.cocycle import *  # noqa
from qpballistic.components import *  # noqa
from qpballistic.config import *  # noqa
from qpballistic.enums import *  # noqa
from qpballistic.evolve import *  # noqa
from qpballistic.outputs import *  # noqa
from qpballistic.potential import *  # noqa
from qpballistic.reduce import *  # noqa
from qpballistic.series import *  # noqa
from qpballistic.transform import *  # noqa
