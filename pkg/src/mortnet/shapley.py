"""Exact Shapley values by exhaustive subset enumeration."""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial
from typing import Callable

import numpy as np

from mortnet.ingest import FEATURE_NAMES
from mortnet.layers import AFFINE_KINDS
from mortnet.model import Network

MAX_PLAYERS = 20


@dataclass
class CoalitionalGame:
    """``worth`` maps an (M, n_players) boolean membership matrix to M worths."""

    n_players: int
    worth: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_set_function(cls, n_players: int, fn: Callable[[frozenset], float]) -> "CoalitionalGame":
        def worth(members):
            return np.array([fn(frozenset(np.flatnonzero(row).tolist())) for row in members])
        return cls(n_players, worth)


@dataclass
class ShapleyResult:
    values: np.ndarray
    efficiency_residual: float
    grand_worth: float
    empty_worth: float


def _membership(codes: np.ndarray, n: int) -> np.ndarray:
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def coalition_worths(game: CoalitionalGame, chunk: int = 1 << 14) -> np.ndarray:
    """Worth of every coalition, indexed by its bit code (player i <-> bit i)."""
    n = game.n_players
    total = 1 << n
    out = np.empty(total)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        out[codes] = np.asarray(game.worth(_membership(codes, n)), dtype=np.float64).reshape(-1)
    return out


def exact_shapley(game: CoalitionalGame, max_players: int = MAX_PLAYERS) -> ShapleyResult:
    """Sh_i = sum over S not containing i of |S|!(n-|S|-1)!/n! * (v(S+i) - v(S)).

    Each of the 2^n coalitions is evaluated once and reused for all n
    marginal differences.
    """
    n = game.n_players
    if n < 1:
        raise ValueError("a game needs at least one player")
    if n > max_players:
        raise ValueError(f"{n} players need 2^{n} = {1 << n:,} worth evaluations; "
                         f"the limit is {max_players} players ({1 << max_players:,} evaluations)")
    v = coalition_worths(game)
    codes = np.arange(1 << n, dtype=np.int64)
    sizes = np.bitwise_count(codes) if hasattr(np, "bitwise_count") else \
        np.array([bin(c).count("1") for c in codes])
    weight_by_size = np.array([factorial(s) * factorial(n - s - 1) / factorial(n) for s in range(n)])
    values = np.empty(n)
    for i in range(n):
        bit = 1 << i
        without = codes[(codes & bit) == 0]
        values[i] = np.sum(weight_by_size[sizes[without]] * (v[without | bit] - v[without]))
    grand, empty = v[-1], v[0]
    return ShapleyResult(values, float(abs(values.sum() - (grand - empty))), float(grand), float(empty))


def per_channel_groups(shape=(len(FEATURE_NAMES), 48)) -> list[np.ndarray]:
    groups = []
    for c in range(shape[0]):
        m = np.zeros(shape, dtype=bool)
        m[c] = True
        groups.append(m)
    return groups


# semantically related predictors merged so exact enumeration stays cheap
ORGAN_GROUPS = {
    "gcs": ("gcs_eyes", "gcs_motor", "gcs_verbal"),
    "blood_pressure": ("systolic_bp", "diastolic_bp"),
    "heart_rate": ("heart_rate",),
    "respiratory": ("fio2", "po2"),
    "renal": ("bun", "urine_output"),
    "electrolytes": ("bicarbonate", "potassium", "sodium"),
    "hepatic": ("bilirubin",),
    "temperature": ("temperature",),
    "wbc": ("wbc",),
    "age": ("age",),
    "admission": ("elective_admission", "surgical_admission"),
    "comorbidity": ("aids", "metastatic_cancer", "lymphoma"),
}


def organ_groups(shape=(len(FEATURE_NAMES), 48)) -> tuple[list[str], list[np.ndarray]]:
    names, groups = [], []
    for name, feats in ORGAN_GROUPS.items():
        m = np.zeros(shape, dtype=bool)
        for f in feats:
            m[FEATURE_NAMES.index(f)] = True
        names.append(name)
        groups.append(m)
    return names, groups


def _validate_partition(groups, shape) -> np.ndarray:
    masks = np.stack([np.asarray(g, dtype=bool) for g in groups]) if len(groups) else None
    if masks is None or masks.shape[1:] != tuple(shape):
        raise ValueError(f"groups must be boolean masks of shape {shape}")
    cover = masks.sum(axis=0)
    if np.any(cover > 1):
        raise ValueError("groups overlap")
    if np.any(cover == 0):
        raise ValueError("groups do not cover the whole grid")
    return masks


def _precomputed_worth(network: Network, x, ref, masks, logits: bool):
    """Worth function that reuses per-group outputs of each branch's first (affine) layer.

    L(ref + sum_g d_g) = L(ref) + sum_g [L(ref + d_g) - L(ref)] for affine L,
    so the costly convolutions run once per group instead of once per coalition.
    """
    singles = ref[None] + masks * (x - ref)[None]
    firsts = []
    for branch in network.branches:
        layer = branch[0]
        base = layer.forward(ref[None], False, None)[0]
        firsts.append((base, layer.forward(singles, False, None) - base))
    stop = len(network.trunk) - 1 if (logits and network.has_sigmoid) else len(network.trunk)

    def run(members: np.ndarray) -> np.ndarray:
        m = members.astype(np.float64)
        outs = []
        for branch, (base, deltas) in zip(network.branches, firsts):
            h = base[None] + np.tensordot(m, deltas, axes=1)
            for layer in branch[1:]:
                h = layer.forward(h, False, None)
            outs.append(h)
        h = np.concatenate(outs, axis=1)
        for layer in network.trunk[:stop]:
            h = layer.forward(h, False, None)
        return h.reshape(len(m), -1)[:, 0]

    return run


def model_game(network: Network, patient, reference, groups, target: str = "logit",
               batch: int = 1024, precompute: bool = False) -> CoalitionalGame:
    """Reference-substitution game: coalition members take actual values, others the reference.

    Worths are normalised so the empty coalition is worth 0. ``precompute``
    enables the affine first-layer shortcut for branched networks; results
    then agree with direct evaluation up to rounding only.
    """
    if target not in ("logit", "probability"):
        raise ValueError("target must be 'logit' or 'probability'")
    x = np.asarray(getattr(patient, "grid", patient), dtype=np.float64)
    ref = np.broadcast_to(np.asarray(reference, dtype=np.float64), x.shape)
    masks = _validate_partition(groups, x.shape)
    logits = target == "logit"
    base = float(np.asarray(network.forward(ref[None], logits=logits)).reshape(-1)[0])
    grand = float(np.asarray(network.forward(x[None], logits=logits)).reshape(-1)[0]) - base
    live = (masks & (x != ref)[None]).reshape(len(masks), -1).any(axis=1)
    n_live = int(live.sum())
    fast = None
    if precompute and network.branches and all(b[0].kind in AFFINE_KINDS for b in network.branches):
        fast = _precomputed_worth(network, x, ref, masks.astype(np.float64), logits)

    def worth(members: np.ndarray) -> np.ndarray:
        out = np.empty(len(members))
        for s in range(0, len(members), batch):
            m = members[s:s + batch]
            if fast is not None:
                out[s:s + batch] = fast(m)
                continue
            cells = np.tensordot(m.astype(np.float64), masks.astype(np.float64), axes=1) > 0
            hybrid = np.where(cells, x, ref)
            out[s:s + batch] = np.asarray(network.forward(hybrid, logits=logits)).reshape(-1)
        out -= base
        # batched matmuls may round differently from single-row passes, so hybrids that
        # coincide with the reference or the patient get the single-pass worths exactly
        hits = members[:, live].sum(axis=1)
        out[hits == n_live] = grand
        out[hits == 0] = 0.0
        return out

    return CoalitionalGame(len(masks), worth)
