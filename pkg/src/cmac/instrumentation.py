"""Lightweight execution counters.

The ablation harness asserts on these to prove that disabled modules are not
merely ignored in the loss but never executed at all.
"""

import hashlib

import numpy as np


class Counters:
    __slots__ = ("global_attention_steps", "stn_transforms", "fusion_calls")

    def __init__(self):
        self.reset()

    def reset(self):
        self.global_attention_steps = 0
        self.stn_transforms = 0
        self.fusion_calls = 0

    def snapshot(self) -> dict:
        return {
            "global_attention_steps": self.global_attention_steps,
            "stn_transforms": self.stn_transforms,
            "fusion_calls": self.fusion_calls,
        }


#: process-wide counters; reset() between measured phases
counters = Counters()


class MarginProbe:
    """Collects distance-to-nonsmoothness margins during a forward pass.

    Finite-difference gradient checks are only valid away from kinks (relu
    zero crossings, pooling argmax ties, bilinear integer crossings, the
    smooth-L1 elbow). When ``active``, instrumented ops report their smallest
    margin here; a driver can then redraw inputs until every margin clears a
    threshold before differencing.

    With ``start(signature=True)`` the ops additionally fold their branch
    decisions (relu sign masks, pool argmax cells, bilinear cell indices,
    piece selectors) into a running hash. Two evaluations with equal
    signatures took identical paths through every kink, so their difference
    quotient measures a genuinely smooth section of the loss.
    """

    __slots__ = ("active", "records", "_sig")

    def __init__(self):
        self.active = False
        self.records: list[tuple[str, float]] = []
        self._sig = None

    def start(self, signature: bool = False):
        self.active = True
        self.records = []
        self._sig = hashlib.blake2b(digest_size=16) if signature else None

    def stop(self):
        self.active = False

    def add(self, kind: str, value: float):
        if self.active:
            self.records.append((kind, float(value)))

    def branch(self, kind: str, ids) -> None:
        """Fold one op's branch decisions into the signature (if recording)."""
        if self._sig is not None:
            self._sig.update(kind.encode("ascii"))
            self._sig.update(np.ascontiguousarray(ids).tobytes())

    def signature(self) -> str | None:
        """Hex digest of all branches since start(); None unless recording."""
        return None if self._sig is None else self._sig.hexdigest()

    def min_margin(self) -> float:
        return min((v for _, v in self.records), default=float("inf"))


#: process-wide probe, off by default (one attribute check per instrumented op)
margin_probe = MarginProbe()
