# flake8: noqa

from .config import *
from .util import *
from .interfaces import *
from .autodiff import *
from .grid_data import *
from .network import *
from .losses import *
from .variogram import *
from .baselines import *
from .synthetic import *
from .training import *
from .data_loader import *
from .factory import *
from .cli import *

__version__ = "0.3.0"
