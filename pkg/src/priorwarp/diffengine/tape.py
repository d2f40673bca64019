"""Tape-based reverse-mode differentiation.

A `Tape` records every primitive applied to tracked values (`Var`) in order.
`backward` walks the record in reverse, feeding each node's adjoint to the
closure stored with it.  Untracked operands (plain ndarrays) are constants.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Var:
    """A value tracked on a tape.  ``grad`` is filled in by `backward`."""

    __slots__ = ("value", "tape", "grad", "leaf")

    def __init__(self, value, tape: "Tape", leaf: bool = False):
        self.value = value
        self.tape = tape
        self.grad = None
        self.leaf = leaf

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={self.leaf})"


class Tape:
    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self._records: list[tuple[Var, tuple, object]] = []
        self._leaves: list[Var] = []
        self.consumed = False

    def __len__(self):
        return len(self._records)

    def var(self, value) -> Var:
        """Register a leaf (parameter or designated input)."""
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        v = Var(np.array(value, dtype=np.float64), self, leaf=True)
        self._leaves.append(v)
        return v

    def watch(self, params) -> dict[str, Var]:
        """Leaf Vars for every trainable array of a ParameterSet, keyed by name."""
        return {name: self.var(params[name]) for name in params.names}

    def record(self, value, parents: tuple, backward) -> Var:
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced ({len(self._records)} ops recorded)")
        out = Var(value, self)
        self._records.append((out, parents, backward))
        return out


def tape_of(*xs) -> Tape | None:
    """The single tape shared by the tracked operands (None if all constant)."""
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands live on different tapes")
    return tape


def value(x):
    return x.value if isinstance(x, Var) else x


def backward(tape: Tape, loss: Var) -> None:
    """Fill ``.grad`` on every leaf of `tape` with d(loss)/d(leaf).

    Leaves the loss does not depend on get zero gradients.  The tape is
    cleared afterwards and cannot be replayed.
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise TapeError("loss was not produced on this tape")
    if np.size(loss.value) != 1:
        raise ShapeError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    loss.grad = np.ones_like(loss.value)
    for out, parents, fn in reversed(tape._records):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for parent, g in zip(parents, grads):
            if g is None or not isinstance(parent, Var):
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
        if not out.leaf:
            out.grad = None
    for leaf in tape._leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.value)
    tape._records.clear()
    tape.consumed = True


def flat_grad(leaves: dict[str, Var], params) -> np.ndarray:
    """Concatenate leaf gradients in the ParameterSet's flat order."""
    return np.concatenate([leaves[name].grad.ravel() for name in params.names])
