"""Einstein-product tensor Krylov methods for MLTI model reduction and
discrete Lyapunov (Stein) tensor equations."""

from .tensor import *  # noqa: F401,F403
from .krylov import *  # noqa: F401,F403
from .lyapunov import *  # noqa: F401,F403
from .mor import *  # noqa: F401,F403
from .bt import *  # noqa: F401,F403
from .bench import *  # noqa: F401,F403

__version__ = "0.1.0"
