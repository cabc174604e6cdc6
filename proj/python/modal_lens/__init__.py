from ._modal_lens import *  # noqa: F401,F403
from ._modal_lens import __doc__  # noqa: F401
