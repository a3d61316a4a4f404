from .nn import MlpSpec, ParamStore, forward, init_mlp, mlp_forward
from .optim import AdamState, adam_step
from .tape import Tape, TapeError, Var

__all__ = [
    "AdamState",
    "MlpSpec",
    "ParamStore",
    "Tape",
    "TapeError",
    "Var",
    "adam_step",
    "forward",
    "init_mlp",
    "mlp_forward",
]
