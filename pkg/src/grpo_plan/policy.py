"""Grammar-masked log-linear autoregressive policy.

The logit of token ``v`` at step ``t`` is::

    B[p, v] + sum_j f_j * W[j, p, v] + sum_k E[k, tok_{t-k}, v]

where ``p`` is the grammar position index, ``f`` the scene feature vector and
``tok_{t-k}`` the last ``K`` prefix tokens (a padding row stands in for
missing history).  Only text tokens (everything but coordinate bins) carry
``W`` and ``E`` weights.  Coordinate steps use the bias plus a Gaussian-shaped
term over the bin values::

    - lam[p] * (val_v - mu)^2
    mu = m0[p] + U[p, m] . f + R[p] . val(tok_{t-1..t-K})

with ``lam = exp(rho[p]) - 1``, which lets neighbouring bins share evidence.
``m`` is the decision already emitted in the think section: the
longitudinal action for x coordinates, the lateral one for y, and a
separate "none" value without reasoning.  The trajectory therefore follows
the stated decision instead of reading the maneuver off the features
alone.  With all parameters at zero the policy is uniform over legal
tokens.  Tokens the grammar forbids get ``-inf``.  Everything is float64
and differentiated by hand.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grammar
from .grammar import VOCAB, GrammarError, legal_mask
from .world import DT, MANEUVERS, Maneuver, Scene

N_FEATURES = 32
N_POSITIONS = grammar.MAX_LEN
CONTEXT = 4
V = VOCAB.size
PAD = V
# every non-coordinate token id lies below the first X-bin token
N_TEXT = VOCAB.x_start

VALUE_SCALE = 10.0

# decided meta action as seen by the coordinate head; the last index means
# "no decision yet" (or an empty think section)
_LAT_IDS = np.flatnonzero(VOCAB.is_lat)
_LON_IDS = np.flatnonzero(VOCAB.is_lon)
N_LAT, N_LON = len(_LAT_IDS), len(_LON_IDS)
N_META = max(N_LAT, N_LON) + 1
# 1 where the position emits a y coordinate (keyed on the lateral decision)
_Y_POSITION = np.zeros(N_POSITIONS, dtype=bool)
_Y_POSITION[grammar.TRAJ_POSITION_BASE + 2:grammar.TRAJ_POSITION_BASE + 1 + grammar.N_COORDS:2] = True
_META_INDEX = np.full((V, 2), -1, dtype=np.int64)
_META_INDEX[_LAT_IDS, 0] = np.arange(N_LAT)
_META_INDEX[_LON_IDS, 1] = np.arange(N_LON)

_SHAPES = {
    "W": (N_FEATURES, N_POSITIONS, N_TEXT),
    "B": (N_POSITIONS, V),
    "E": (CONTEXT, V + 1, N_TEXT),
    "U": (N_POSITIONS, N_META, N_FEATURES),
    "R": (N_POSITIONS, CONTEXT),
    "m0": (N_POSITIONS,),
    "rho": (N_POSITIONS,),
}
_OFFSETS = {}
_n = 0
for _k, _shape in _SHAPES.items():
    _OFFSETS[_k] = (_n, _n + int(np.prod(_shape)))
    _n = _OFFSETS[_k][1]
N_PARAMS = _n

# bin value of every token (0 for non-coordinates and padding), in VALUE_SCALE units
TOKEN_VALUE = np.zeros(V + 1)
TOKEN_VALUE[VOCAB.x_start:VOCAB.y_start] = (grammar.X_MIN + grammar.BIN * np.arange(grammar.N_X)) / VALUE_SCALE
TOKEN_VALUE[VOCAB.y_start:V] = (grammar.Y_MIN + grammar.BIN * np.arange(grammar.N_Y)) / VALUE_SCALE
_CAND_VALUE = TOKEN_VALUE[:V]
COORD_POSITIONS = np.zeros(N_POSITIONS, dtype=bool)
COORD_POSITIONS[grammar.TRAJ_POSITION_BASE + 1:grammar.TRAJ_POSITION_BASE + 1 + grammar.N_COORDS] = True

FORMAT_VERSION = 1
_MAGIC = b"GRPOPLAN"


def unpack(theta: np.ndarray) -> dict:
    """Named views into a flat parameter vector."""
    return {k: theta[a:b].reshape(_SHAPES[k]) for k, (a, b) in _OFFSETS.items()}


def zeros() -> np.ndarray:
    """All-zero parameters: uniform over the legal tokens at every step."""
    return np.zeros(N_PARAMS)


def random_theta(seed: int, scale: float = 0.1) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, scale, size=N_PARAMS)


# ---------------------------------------------------------------------------
# features

_M_INDEX = {m: i for i, m in enumerate(MANEUVERS)}


def scene_features(scene: Scene) -> np.ndarray:
    """Fixed-length conditioning vector for a scene (no ground-truth future)."""
    f = np.zeros(N_FEATURES)
    v0 = float(scene.ego_speed)
    hist = scene.ego_history
    steps = np.diff(hist[:, 0]) / DT
    a_hist = (steps[-1] - steps[0]) / (2 * DT)
    onehot = np.zeros(len(MANEUVERS))
    onehot[_M_INDEX[scene.maneuver]] = 1.0
    cues = scene.cues

    f[0] = v0 / 10.0
    f[1] = (v0 / 10.0) ** 2
    f[2] = a_hist / 2.0
    f[3:10] = onehot
    f[10:17] = onehot * v0 / 10.0
    f[17] = cues.get("stop_distance", 0.0) / 20.0
    f[18] = cues.get("road_curvature", 0.0) * 10.0
    f[19] = cues.get("target_lane_offset", 0.0) / 3.5
    lc = cues.get("lane_change_time", 0.0)
    f[20] = 3.0 / lc if lc > 0 else 0.0
    f[21] = cues.get("conflict_distance", 0.0) / 20.0
    f[22] = len(scene.agents) / 4.0
    if scene.agents:
        near = min(scene.agents, key=lambda a: float(np.hypot(*a.positions[0])))
        f[23:25] = near.positions[0] / np.array([20.0, 10.0])
        f[25:27] = near.velocity() / 10.0
    f[27] = a_hist / 2.0 * onehot[_M_INDEX[Maneuver.CRUISE]]
    f[28] = f[18] * v0 / 10.0
    f[29] = f[19] * v0 / 10.0
    f[30] = f[17] * f[17]
    f[31] = f[21] * v0 / 10.0
    if not np.all(np.isfinite(f)):
        raise ValueError(f"non-finite features for scene {scene.id}")
    return f


# ---------------------------------------------------------------------------
# traces: the per-step bookkeeping shared by log_prob and its gradient


@dataclass(frozen=True)
class Trace:
    tokens: np.ndarray  # (T,)
    positions: np.ndarray  # (T,)
    context: np.ndarray  # (T, K)
    masks: np.ndarray  # (T, V) bool
    n_legal: np.ndarray  # (T,)
    meta: np.ndarray  # (T, 2) decided (lateral, longitudinal) index before each step


def _context_row(prefix: Sequence[int]) -> np.ndarray:
    row = np.full(CONTEXT, PAD, dtype=np.int64)
    for k in range(1, CONTEXT + 1):
        if len(prefix) >= k:
            row[k - 1] = prefix[-k]
    return row


def _meta_key(meta: np.ndarray, pos: np.ndarray) -> np.ndarray:
    key = np.where(_Y_POSITION[pos], meta[:, 0], meta[:, 1])
    # "none" shares one slot for both halves
    return np.where(key == np.where(_Y_POSITION[pos], N_LAT, N_LON), N_META - 1, key)


def _meta_after(meta: np.ndarray, tok: int) -> None:
    lat, lon = _META_INDEX[tok]
    if lat >= 0:
        meta[0] = lat
    if lon >= 0:
        meta[1] = lon


def _meta_rows(ids: Sequence[int]) -> np.ndarray:
    out = np.empty((len(ids), 2), dtype=np.int64)
    cur = np.array([N_LAT, N_LON])
    for t, tok in enumerate(ids):
        out[t] = cur
        _meta_after(cur, tok)
    return out


def trace(token_ids: Sequence[int]) -> Trace:
    """Grammar walk of a complete sequence; raises ``GrammarError`` if invalid."""
    ids = [int(t) for t in token_ids]
    states = grammar.walk(ids)
    T = len(ids)
    ctx = np.full((T, CONTEXT), PAD, dtype=np.int64)
    for t in range(T):
        for k in range(1, CONTEXT + 1):
            if t - k >= 0:
                ctx[t, k - 1] = ids[t - k]
    masks = np.stack([legal_mask(s) for s in states])
    return Trace(
        tokens=np.asarray(ids, dtype=np.int64),
        positions=np.array([grammar.position_index(s, t) for t, s in enumerate(states)], dtype=np.int64),
        context=ctx,
        masks=masks,
        n_legal=masks.sum(axis=1),
        meta=_meta_rows(ids),
    )


def _feature_logits(params: dict, feats: np.ndarray) -> np.ndarray:
    return (feats @ params["W"].reshape(N_FEATURES, -1)).reshape(len(feats), N_POSITIONS, N_TEXT)


def _text_logits(params: dict, zf, seq, pos, ctx) -> np.ndarray:
    """Logits over the text columns for non-coordinate steps."""
    z = zf[seq, pos] + params["B"][pos, :N_TEXT]
    e = params["E"]
    for k in range(CONTEXT):
        z += e[k, ctx[:, k]]
    return z


def _coord_logits(params: dict, feats, seq, pos, ctx, meta):
    """Bias plus Gaussian bin term for coordinate steps, with the head values."""
    cval = TOKEN_VALUE[ctx]
    mu = (
        params["m0"][pos]
        + np.einsum("nf,nf->n", params["U"][pos, _meta_key(meta, pos)], feats[seq])
        + np.einsum("nk,nk->n", params["R"][pos], cval)
    )
    lam = np.expm1(params["rho"][pos])
    diff = _CAND_VALUE[None, :] - mu[:, None]
    z = params["B"][pos] - lam[:, None] * diff**2
    return z, (cval, lam, diff)


def _rows(params: dict, feats, zf, seq, pos, ctx, meta) -> np.ndarray:
    """Unmasked logits (n, V) for a stack of steps; unused columns are 0."""
    z = np.zeros((len(pos), V))
    coord = COORD_POSITIONS[pos]
    t = np.flatnonzero(~coord)
    c = np.flatnonzero(coord)
    if len(t):
        z[t, :N_TEXT] = _text_logits(params, zf, seq[t], pos[t], ctx[t])
    if len(c):
        z[c] = _coord_logits(params, feats, seq[c], pos[c], ctx[c], meta[c])[0]
    return z


def _scatter_add(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """``out[idx[i]] += rows[i]`` with repeated indices (faster than ``np.add.at``)."""
    if len(idx) == 0:
        return
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] += np.add.reduceat(rows[order], starts, axis=0)


def _masked_log_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    return z - lse


def _state_after(prefix: Sequence[int]):
    state = grammar.START
    for tok in prefix:
        nxt = grammar.advance(state, tok)
        if nxt is None:
            raise GrammarError(f"prefix not grammar-valid at token {VOCAB.decode(tok)!r}")
        state = nxt
    if state == grammar.DONE:
        raise GrammarError("prefix already complete")
    return state


def logits(theta, features, prefix: Sequence[int]) -> np.ndarray:
    """Masked logits over the vocabulary for the next token after ``prefix``."""
    prefix = [int(t) for t in prefix]
    state = _state_after(prefix)
    params = unpack(theta)
    f = np.asarray(features, dtype=np.float64)[None]
    pos = np.array([grammar.position_index(state, len(prefix))])
    meta = _meta_rows(prefix + [0])[-1:]
    z = _rows(params, f, _feature_logits(params, f), np.zeros(1, dtype=np.int64), pos, _context_row(prefix)[None], meta)
    return np.where(legal_mask(state), z[0], -np.inf)


def _stack(traces: Sequence[Trace]):
    lengths = np.array([len(tr.tokens) for tr in traces])
    seq = np.repeat(np.arange(len(traces)), lengths)
    cat = lambda name: np.concatenate([getattr(tr, name) for tr in traces])
    return seq, cat("positions"), cat("context"), cat("masks"), cat("tokens"), cat("n_legal"), cat("meta")


def _forward(params, feats, traces):
    """Per-step log-probabilities of the taken tokens, split by step kind.

    Steps with a single legal token contribute exactly 0 and are skipped.
    """
    seq, pos, ctx, masks, toks, n_legal, meta = _stack(traces)
    coord = COORD_POSITIONS[pos]
    multi = n_legal > 1
    t = np.flatnonzero(multi & ~coord)
    c = np.flatnonzero(multi & coord)
    zf = _feature_logits(params, feats)
    logp_t = _masked_log_softmax(_text_logits(params, zf, seq[t], pos[t], ctx[t]), masks[t, :N_TEXT])
    zc, head = _coord_logits(params, feats, seq[c], pos[c], ctx[c], meta[c])
    logp_c = _masked_log_softmax(zc, masks[c])
    per_tok = np.zeros(len(toks))
    per_tok[t] = logp_t[np.arange(len(t)), toks[t]]
    per_tok[c] = logp_c[np.arange(len(c)), toks[c]]
    seq_logp = np.bincount(seq, weights=per_tok, minlength=len(traces))
    return seq_logp, (seq, pos, ctx, meta, toks, t, c, logp_t, logp_c, head)


def batch_log_prob(theta, feats: np.ndarray, traces: Sequence[Trace]) -> np.ndarray:
    """Sequence log-probabilities, one per trace."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    return _forward(unpack(theta), feats, traces)[0]


def batch_log_prob_grad(theta, feats: np.ndarray, traces: Sequence[Trace], weights=None):
    """Log-probabilities and ``sum_n weights[n] * grad log p_n``.

    Returns ``(logp, grad)`` where ``grad`` is a flat vector shaped like
    ``theta``.  ``weights`` may also be a callable mapping the sequence
    log-probabilities to weights, which saves a forward pass when the
    weights depend on them.
    """
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    n = len(traces)
    params = unpack(theta)
    seq_logp, (seq, pos, ctx, meta, toks, t, c, logp_t, logp_c, head) = _forward(params, feats, traces)
    if callable(weights):
        weights = weights(seq_logp)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)

    # d log p(y) / d z = onehot(y) - softmax(z)
    def dz(logp, rows):
        g = -np.exp(logp)
        g[np.arange(len(rows)), toks[rows]] += 1.0
        g *= weights[seq[rows]][:, None]
        return g

    grad = np.zeros(N_PARAMS)
    gp = unpack(grad)
    if len(t):
        gt = dz(logp_t, t)
        st, pt = seq[t], pos[t]
        used, slot = np.unique(pt, return_inverse=True)
        dense = np.zeros((n, len(used), N_TEXT))
        dense[st, slot] = gt  # (sequence, position) pairs are unique
        gp["W"][:, used, :] = (feats.T @ dense.reshape(n, -1)).reshape(N_FEATURES, len(used), N_TEXT)
        _scatter_add(gp["B"][:, :N_TEXT], pt, gt)
        e_flat = gp["E"].reshape(CONTEXT * (V + 1), N_TEXT)
        keys = (ctx[t] + (V + 1) * np.arange(CONTEXT)[None, :]).T.ravel()
        _scatter_add(e_flat, keys, np.tile(gt, (CONTEXT, 1)))
    if len(c):
        gc = dz(logp_c, c)
        pc = pos[c]
        _scatter_add(gp["B"], pc, gc)
        cval, lam, diff = head
        # z_v = -lam (val_v - mu)^2 with lam = exp(rho) - 1
        d_rho = -(gc * diff**2).sum(axis=1) * (lam + 1.0)
        d_mu = 2.0 * lam * (gc * diff).sum(axis=1)
        gp["rho"][:] = np.bincount(pc, weights=d_rho, minlength=N_POSITIONS)
        gp["m0"][:] = np.bincount(pc, weights=d_mu, minlength=N_POSITIONS)
        u_flat = gp["U"].reshape(N_POSITIONS * N_META, N_FEATURES)
        _scatter_add(u_flat, pc * N_META + _meta_key(meta[c], pc), d_mu[:, None] * feats[seq[c]])
        _scatter_add(gp["R"], pc, d_mu[:, None] * cval)
    return seq_logp, grad


def log_prob(theta, features, token_ids: Sequence[int]) -> float:
    """log pi(token_ids | features); raises ``GrammarError`` on invalid input."""
    return float(batch_log_prob(theta, features, [trace(token_ids)])[0])


def grad_log_prob(theta, features, token_ids: Sequence[int]) -> np.ndarray:
    return batch_log_prob_grad(theta, features, [trace(token_ids)])[1]


# ---------------------------------------------------------------------------
# sampling


def sample_batch(theta, feats: np.ndarray, temperature: float | None, seeds: Sequence[int]) -> list[list[int]]:
    """Sample one sequence per row of ``feats``.

    ``temperature=None`` decodes greedily.  Each row draws from its own
    generator seeded with ``seeds[i]``, so results do not depend on batching.
    """
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if temperature is not None and not temperature > 0:
        raise ValueError("temperature must be positive")
    n = len(feats)
    rngs = [np.random.default_rng(int(s) & 0xFFFFFFFFFFFFFFFF) for s in seeds] if temperature is not None else None
    params = unpack(theta)
    zf = _feature_logits(params, feats)
    out: list[list[int]] = [[] for _ in range(n)]
    states = [grammar.START] * n
    metas = np.tile(np.array([N_LAT, N_LON]), (n, 1))
    active = list(range(n))
    t = 0
    while active:
        idx = np.array(active)
        pos = np.array([grammar.position_index(states[i], t) for i in active])
        ctx = np.stack([_context_row(out[i]) for i in active])
        masks = np.stack([legal_mask(states[i]) for i in active])
        z = _rows(params, feats, zf, idx, pos, ctx, metas[idx])
        z = np.where(masks, z, -np.inf)
        if temperature is None:
            choice = z.argmax(axis=1)
        else:
            zt = z / temperature
            zt -= zt.max(axis=1, keepdims=True)
            p = np.exp(zt)
            cdf = np.cumsum(p, axis=1)
            u = np.array([rngs[i].random() for i in active]) * cdf[:, -1]
            choice = np.array([np.searchsorted(cdf[r], u[r], side="right") for r in range(len(active))])
            choice = np.minimum(choice, V - 1)
            bad = ~masks[np.arange(len(active)), choice]
            if bad.any():  # u landed on a zero-width tail bin
                choice[bad] = z[bad].argmax(axis=1)
        still = []
        for r, i in enumerate(active):
            tok = int(choice[r])
            out[i].append(tok)
            _meta_after(metas[i], tok)
            states[i] = grammar.advance(states[i], tok)
            if states[i] != grammar.DONE:
                still.append(i)
        active = still
        t += 1
    return out


def sample(theta, features, temperature: float, rng_seed: int) -> list[int]:
    return sample_batch(theta, features, temperature, [rng_seed])[0]


def greedy(theta, features) -> list[int]:
    return sample_batch(theta, features, None, [0])[0]


# ---------------------------------------------------------------------------
# snapshots and checkpoints


class Role(str, Enum):
    CURRENT = "current"
    OLD = "old"
    REFERENCE = "reference"


class CheckpointError(ValueError):
    """Checkpoint file unreadable or incompatible."""


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    """Immutable parameter vector tagged with its role."""

    theta: np.ndarray
    role: Role = Role.CURRENT
    version: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, copy=True)
        if theta.shape != (N_PARAMS,):
            raise ValueError(f"theta must have {N_PARAMS} entries, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite values")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "role", Role(self.role))

    def with_role(self, role: Role | str, version: int | None = None) -> "PolicySnapshot":
        return PolicySnapshot(self.theta, role, self.version if version is None else version)

    def __eq__(self, other):
        if not isinstance(other, PolicySnapshot):
            return NotImplemented
        return self.role == other.role and self.version == other.version and np.array_equal(self.theta, other.theta)

    __hash__ = None


def save_checkpoint(snapshot: PolicySnapshot, path) -> None:
    payload = snapshot.theta.astype("<f8").tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "n_features": N_FEATURES,
        "n_positions": N_POSITIONS,
        "context": CONTEXT,
        "vocab_size": V,
        "vocab_hash": f"{VOCAB.hash64():016x}",
        "role": snapshot.role.value,
        "version": int(snapshot.version),
        "n_params": N_PARAMS,
        "crc32": zlib.crc32(payload),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{Path(path).name}: not a policy checkpoint")
        size_raw = fh.read(4)
        if len(size_raw) != 4:
            raise CheckpointError(f"{Path(path).name}: truncated header")
        (size,) = struct.unpack("<I", size_raw)
        try:
            return json.loads(fh.read(size))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{Path(path).name}: corrupt header") from exc


def load_checkpoint(path) -> PolicySnapshot:
    header = read_checkpoint_header(path)
    name = Path(path).name
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{name}: unsupported format version {header.get('format_version')!r}")
    if header.get("vocab_hash") != f"{VOCAB.hash64():016x}":
        raise CheckpointError(f"{name}: vocabulary hash mismatch")
    if header.get("n_features") != N_FEATURES or header.get("n_params") != N_PARAMS:
        raise CheckpointError(f"{name}: parameter layout mismatch")
    with open(path, "rb") as fh:
        fh.seek(len(_MAGIC))
        (size,) = struct.unpack("<I", fh.read(4))
        fh.seek(len(_MAGIC) + 4 + size)
        payload = fh.read()
    if len(payload) != 8 * N_PARAMS or zlib.crc32(payload) != header.get("crc32"):
        raise CheckpointError(f"{name}: corrupt parameter payload")
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return PolicySnapshot(theta, header["role"], int(header["version"]))


def is_checkpoint(path) -> bool:
    try:
        read_checkpoint_header(path)
    except (CheckpointError, OSError):
        return False
    return True
