from priorwarp.diffengine.adam import AdamState, adam_step
from priorwarp.diffengine.ops import (
    add,
    concat,
    cosine,
    linear,
    mse,
    mul,
    reshape,
    scale,
    sine,
    sub,
    take_rows,
    trilinear_grid_sample,
)
from priorwarp.diffengine.params import CheckpointError, ParameterSet, load_checkpoint, save_checkpoint
from priorwarp.diffengine.tape import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Var,
    backward,
    flat_grad,
    value,
)

__all__ = [
    "AdamState", "adam_step", "add", "concat", "cosine", "linear", "mse", "mul", "reshape",
    "scale", "sine", "sub", "take_rows", "trilinear_grid_sample", "CheckpointError",
    "ParameterSet", "load_checkpoint", "save_checkpoint", "NonFiniteError", "ShapeError",
    "Tape", "TapeError", "Var", "backward", "flat_grad", "value",
]
