"""Token vocabulary and the ``<think>…</think><trajectory>…</trajectory>`` format.

A response is a flat token sequence::

    <think> (<slot_d> body </slot>)* </think> <trajectory> (X Y)*6 </trajectory> <eos>

Slots appear in increasing domain order.  A non-empty think section must end
with the decision slot, whose body is up to three filler phrases followed by
exactly one lateral and one longitudinal meta token.  The same automaton
drives parsing here and the sampling mask in :mod:`grpo_plan.policy`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .world import (
    FILLER_PHRASES,
    MAX_DECISION_FILLERS,
    MAX_SLOT_FILLERS,
    N_WAYPOINTS,
    SLOT_NAMES,
    Lateral,
    Longitudinal,
    MetaAction,
    Trajectory,
)

X_MIN, X_MAX = -2.0, 62.0
Y_MIN, Y_MAX = -16.0, 16.0
BIN = 0.25
N_X = int(round((X_MAX - X_MIN) / BIN)) + 1
N_Y = int(round((Y_MAX - Y_MIN) / BIN)) + 1
N_COORDS = 2 * N_WAYPOINTS
MAX_LEN = 64

DECISION_SLOT = len(SLOT_NAMES) - 1


class GrammarError(ValueError):
    """Token sequence does not follow the response format."""

    kind = "grammar"


class MissingSection(GrammarError):
    kind = "missing_section"


class BadArity(GrammarError):
    kind = "bad_arity"


class NoMeta(GrammarError):
    kind = "no_meta"


class Vocabulary:
    """Dense, 0-based token ids.  Ordering is fixed, so ids are stable."""

    def __init__(self):
        tokens = ["<think>", "</think>", "<trajectory>", "</trajectory>", "<eos>"]
        self.THINK_OPEN, self.THINK_CLOSE, self.TRAJ_OPEN, self.TRAJ_CLOSE, self.EOS = range(5)
        self.slot_open = tuple(range(len(tokens), len(tokens) + len(SLOT_NAMES)))
        tokens += [f"<{name}>" for name in SLOT_NAMES]
        self.SLOT_CLOSE = len(tokens)
        tokens.append("</slot>")
        self.lateral = {m: len(tokens) + i for i, m in enumerate(Lateral)}
        tokens += [m.value for m in Lateral]
        self.longitudinal = {m: len(tokens) + i for i, m in enumerate(Longitudinal)}
        tokens += [m.value for m in Longitudinal]
        self.filler_start = len(tokens)
        tokens += list(FILLER_PHRASES)
        self.x_start = len(tokens)
        tokens += [f"x:{X_MIN + BIN * i:.2f}" for i in range(N_X)]
        self.y_start = len(tokens)
        tokens += [f"y:{Y_MIN + BIN * i:.2f}" for i in range(N_Y)]
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise RuntimeError("duplicate token strings")
        self.size = len(tokens)
        self.lateral_of = {v: k for k, v in self.lateral.items()}
        self.longitudinal_of = {v: k for k, v in self.longitudinal.items()}

        self.is_filler = np.zeros(self.size, dtype=bool)
        self.is_filler[self.filler_start:self.x_start] = True
        self.is_x = np.zeros(self.size, dtype=bool)
        self.is_x[self.x_start:self.y_start] = True
        self.is_y = np.zeros(self.size, dtype=bool)
        self.is_y[self.y_start:] = True
        self.is_lat = np.zeros(self.size, dtype=bool)
        self.is_lat[list(self.lateral.values())] = True
        self.is_lon = np.zeros(self.size, dtype=bool)
        self.is_lon[list(self.longitudinal.values())] = True
        self._think_re = re.compile(
            r"\s*(?:,\s*)?("
            + "|".join(re.escape(t) for t in sorted(self.think_tokens(), key=len, reverse=True))
            + r")(?=[\s,]|$)"
        )

    def __len__(self):
        return self.size

    def encode(self, token: str) -> int:
        return self.index[token]

    def decode(self, token_id: int) -> str:
        return self.tokens[token_id]

    def think_tokens(self) -> list[str]:
        ids = list(self.slot_open) + [self.SLOT_CLOSE]
        ids += list(self.lateral.values()) + list(self.longitudinal.values())
        ids += list(range(self.filler_start, self.x_start))
        return [self.tokens[i] for i in ids]

    def filler(self, phrase: str) -> int:
        i = self.index[phrase]
        if not self.is_filler[i]:
            raise KeyError(phrase)
        return i

    def hash64(self) -> int:
        """64-bit FNV-1a over the ordered token strings (NUL separated)."""
        h = 0xCBF29CE484222325
        for tok in self.tokens:
            for byte in tok.encode("utf-8") + b"\x00":
                h ^= byte
                h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return h

    # -- coordinates ---------------------------------------------------------

    def x_token(self, i: int) -> int:
        return self.x_start + int(i)

    def y_token(self, i: int) -> int:
        return self.y_start + int(i)

    # -- think text -----------------------------------------------------------

    def tokenize_think(self, text: str) -> list[int]:
        ids = []
        pos = 0
        text = text.rstrip()
        while pos < len(text):
            m = self._think_re.match(text, pos)
            if m is None:
                raise GrammarError(f"unrecognised think text at offset {pos}: {text[pos:pos + 20]!r}")
            ids.append(self.index[m.group(1)])
            pos = m.end()
        return ids

    def render_think(self, ids: Sequence[int]) -> str:
        parts = []
        for i in ids:
            tok = self.tokens[i]
            if self.is_lon[i] and parts and self.is_lat[ids[len(parts) - 1]]:
                parts[-1] = parts[-1] + ","
            parts.append(tok)
        return " ".join(parts)


VOCAB = Vocabulary()


def render_slots(slots) -> str:
    """Think text for ``[(slot_name, body)]`` as produced by the CoT templates."""
    return VOCAB.render_think(slot_tokens(slots))


def slot_tokens(slots) -> list[int]:
    ids = []
    for name, body in slots:
        ids.append(VOCAB.slot_open[SLOT_NAMES.index(name)])
        for item in body:
            if isinstance(item, Lateral):
                ids.append(VOCAB.lateral[item])
            elif isinstance(item, Longitudinal):
                ids.append(VOCAB.longitudinal[item])
            else:
                ids.append(VOCAB.filler(item))
        ids.append(VOCAB.SLOT_CLOSE)
    return ids


# ---------------------------------------------------------------------------
# discretisation


def discretize(trajectory: Trajectory | np.ndarray) -> tuple[np.ndarray, bool]:
    """Map waypoints to 12 bin indices ``(x0, y0, x1, y1, ...)``.

    Returns the indices and whether any coordinate had to be clamped to an
    edge bin (more than half a bin outside the grid).
    """
    wp = trajectory.waypoints if isinstance(trajectory, Trajectory) else np.asarray(trajectory, dtype=np.float64)
    x, y = wp[:, 0], wp[:, 1]
    clamped = bool(
        np.any(x < X_MIN - BIN / 2) or np.any(x > X_MAX + BIN / 2)
        or np.any(y < Y_MIN - BIN / 2) or np.any(y > Y_MAX + BIN / 2)
    )
    xi = np.clip(np.rint((x - X_MIN) / BIN), 0, N_X - 1).astype(np.int64)
    yi = np.clip(np.rint((y - Y_MIN) / BIN), 0, N_Y - 1).astype(np.int64)
    return np.stack([xi, yi], axis=1).ravel(), clamped


def continuize(indices: Sequence[int]) -> Trajectory:
    idx = np.asarray(indices, dtype=np.int64).reshape(N_WAYPOINTS, 2)
    if np.any(idx < 0) or np.any(idx[:, 0] >= N_X) or np.any(idx[:, 1] >= N_Y):
        raise ValueError("bin index out of range")
    return Trajectory(np.stack([X_MIN + BIN * idx[:, 0], Y_MIN + BIN * idx[:, 1]], axis=1))


def quantize(trajectory: Trajectory) -> Trajectory:
    return continuize(discretize(trajectory)[0])


# ---------------------------------------------------------------------------
# automaton

START = ("start",)
THINK_END = ("think_end",)
TRAJ_OPEN_STATE = ("traj_open",)
TRAJ_CLOSE_STATE = ("traj_close",)
EOS_STATE = ("eos",)
DONE = ("done",)

TRAJ_POSITION_BASE = 48


def initial_state():
    return START


@lru_cache(maxsize=None)
def legal_mask(state) -> np.ndarray:
    """Boolean mask over the vocabulary of tokens legal in ``state``."""
    v = VOCAB
    mask = np.zeros(v.size, dtype=bool)
    kind = state[0]
    if kind == "start":
        mask[v.THINK_OPEN] = True
    elif kind == "think":
        _, d_next, any_slot = state
        for d in range(d_next, len(SLOT_NAMES)):
            mask[v.slot_open[d]] = True
        if not any_slot:
            mask[v.THINK_CLOSE] = True
    elif kind == "slot":
        _, d, n = state
        if n < MAX_SLOT_FILLERS:
            mask |= v.is_filler
        if n >= 1:
            mask[v.SLOT_CLOSE] = True
    elif kind == "dec":
        _, n, stage = state
        if stage == 0:
            if n < MAX_DECISION_FILLERS:
                mask |= v.is_filler
            mask |= v.is_lat
        elif stage == 1:
            mask |= v.is_lon
        else:
            mask[v.SLOT_CLOSE] = True
    elif kind == "think_end":
        mask[v.THINK_CLOSE] = True
    elif kind == "traj_open":
        mask[v.TRAJ_OPEN] = True
    elif kind == "coord":
        mask |= v.is_x if state[1] % 2 == 0 else v.is_y
    elif kind == "traj_close":
        mask[v.TRAJ_CLOSE] = True
    elif kind == "eos":
        mask[v.EOS] = True
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=None)
def legal_count(state) -> int:
    return int(legal_mask(state).sum())


def advance(state, token: int):
    """Next automaton state, or ``None`` if ``token`` is illegal here."""
    if not legal_mask(state)[token]:
        return None
    v = VOCAB
    kind = state[0]
    if kind == "start":
        return ("think", 0, False)
    if kind == "think":
        if token == v.THINK_CLOSE:
            return TRAJ_OPEN_STATE
        d = v.slot_open.index(token)
        return ("dec", 0, 0) if d == DECISION_SLOT else ("slot", d, 0)
    if kind == "slot":
        _, d, n = state
        if token == v.SLOT_CLOSE:
            return ("think", d + 1, True)
        return ("slot", d, n + 1)
    if kind == "dec":
        _, n, stage = state
        if stage == 0:
            return ("dec", n + 1, 0) if v.is_filler[token] else ("dec", n, 1)
        if stage == 1:
            return ("dec", n, 2)
        return THINK_END
    if kind == "think_end":
        return TRAJ_OPEN_STATE
    if kind == "traj_open":
        return ("coord", 0)
    if kind == "coord":
        i = state[1] + 1
        return ("coord", i) if i < N_COORDS else TRAJ_CLOSE_STATE
    if kind == "traj_close":
        return EOS_STATE
    if kind == "eos":
        return DONE
    return None


def position_index(state, t: int) -> int:
    """Parameter slot used for the token emitted from ``state`` at step ``t``.

    Think tokens use their absolute step.  Everything from ``<trajectory>`` on
    is indexed relative to the section start, so short and long reasoning
    share the trajectory parameters.
    """
    kind = state[0]
    if kind == "traj_open":
        return TRAJ_POSITION_BASE
    if kind == "coord":
        return TRAJ_POSITION_BASE + 1 + state[1]
    if kind == "traj_close":
        return TRAJ_POSITION_BASE + 1 + N_COORDS
    if kind == "eos":
        return TRAJ_POSITION_BASE + 2 + N_COORDS
    return t


def walk(token_ids: Sequence[int]):
    """States visited before each token; raises ``GrammarError`` on rejection."""
    state = START
    states = []
    for t, tok in enumerate(token_ids):
        if not 0 <= tok < VOCAB.size:
            raise GrammarError(f"token id {tok} outside vocabulary")
        states.append(state)
        nxt = advance(state, tok)
        if nxt is None:
            raise GrammarError(f"token {VOCAB.decode(tok)!r} illegal at step {t}")
        state = nxt
    if state != DONE:
        raise GrammarError("sequence ended before <eos>")
    return states


def is_valid(token_ids: Sequence[int]) -> bool:
    try:
        walk(token_ids)
    except GrammarError:
        return False
    return True


# ---------------------------------------------------------------------------
# parse / serialize


@dataclass(frozen=True)
class Response:
    think: str
    meta: Optional[MetaAction]
    trajectory: Trajectory
    token_ids: tuple

    @property
    def think_ids(self) -> tuple:
        return think_section(self.token_ids)

    def render(self) -> str:
        return render_text(self.token_ids)


def think_section(token_ids: Sequence[int]) -> tuple:
    """Tokens strictly inside ``<think>…</think>`` (best effort on bad input)."""
    ids = list(token_ids)
    start = ids.index(VOCAB.THINK_OPEN) + 1 if VOCAB.THINK_OPEN in ids else 0
    end = ids.index(VOCAB.THINK_CLOSE, start) if VOCAB.THINK_CLOSE in ids[start:] else len(ids)
    if VOCAB.TRAJ_OPEN in ids[start:end]:
        end = ids.index(VOCAB.TRAJ_OPEN, start)
    return tuple(ids[start:end])


def _parse_structure(ids: list[int]):
    v = VOCAB
    for tok in ids:
        if not 0 <= tok < v.size:
            raise MissingSection(f"token id {tok} outside vocabulary")
    structural = (v.THINK_OPEN, v.THINK_CLOSE, v.TRAJ_OPEN, v.TRAJ_CLOSE, v.EOS)
    for tok in structural:
        c = ids.count(tok)
        if c != 1:
            raise MissingSection(f"expected exactly one {v.decode(tok)}, found {c}")
    if ids[0] != v.THINK_OPEN:
        raise MissingSection("sequence must start with <think>")
    if ids[-2:] != [v.TRAJ_CLOSE, v.EOS]:
        raise MissingSection("sequence must end with </trajectory> <eos>")
    close = ids.index(v.THINK_CLOSE)
    if ids[close + 1] != v.TRAJ_OPEN:
        raise MissingSection("</think> must be followed by <trajectory>")
    if len(ids) > MAX_LEN:
        raise MissingSection(f"sequence longer than {MAX_LEN} tokens")
    return ids[1:close], ids[close + 2:-2]


def _parse_trajectory(body: list[int]) -> np.ndarray:
    v = VOCAB
    if len(body) != N_COORDS:
        raise BadArity(f"expected {N_COORDS} coordinate tokens, found {len(body)}")
    idx = []
    for k, tok in enumerate(body):
        want_x = k % 2 == 0
        if want_x and v.is_x[tok]:
            idx.append(tok - v.x_start)
        elif not want_x and v.is_y[tok]:
            idx.append(tok - v.y_start)
        else:
            raise BadArity(f"trajectory token {k} is {v.decode(tok)!r}, expected {'x' if want_x else 'y'} coordinate")
    return np.asarray(idx)


def _parse_think(body: list[int]) -> Optional[MetaAction]:
    v = VOCAB
    if not body:
        return None
    meta = None
    d_next = 0
    i = 0
    while i < len(body):
        tok = body[i]
        if tok not in v.slot_open:
            raise MissingSection(f"expected a slot opener, found {v.decode(tok)!r}")
        d = v.slot_open.index(tok)
        if d < d_next:
            raise MissingSection(f"slot <{SLOT_NAMES[d]}> out of order")
        try:
            j = body.index(v.SLOT_CLOSE, i + 1)
        except ValueError:
            raise MissingSection(f"slot <{SLOT_NAMES[d]}> not closed") from None
        slot_body = body[i + 1:j]
        for t in slot_body:
            if not (v.is_filler[t] or v.is_lat[t] or v.is_lon[t]):
                raise MissingSection(f"token {v.decode(t)!r} not allowed inside a slot")
        if d == DECISION_SLOT:
            if j != len(body) - 1:
                raise MissingSection("decision slot must close the think section")
            if len(slot_body) < 2 or not (v.is_lat[slot_body[-2]] and v.is_lon[slot_body[-1]]):
                raise NoMeta("decision slot must end with one lateral and one longitudinal token")
            fillers = slot_body[:-2]
            if any(not v.is_filler[t] for t in fillers):
                raise NoMeta("decision slot holds more than one lateral/longitudinal token")
            if len(fillers) > MAX_DECISION_FILLERS:
                raise MissingSection("decision slot body too long")
            meta = MetaAction(v.lateral_of[slot_body[-2]], v.longitudinal_of[slot_body[-1]])
        else:
            if any(not v.is_filler[t] for t in slot_body):
                raise NoMeta(f"meta token outside the decision slot in <{SLOT_NAMES[d]}>")
            if not 1 <= len(slot_body) <= MAX_SLOT_FILLERS:
                raise MissingSection(f"slot <{SLOT_NAMES[d]}> body must hold 1..{MAX_SLOT_FILLERS} phrases")
        d_next = d + 1
        i = j + 1
    if meta is None:
        raise NoMeta("think section has no decision slot")
    return meta


def parse(token_ids: Sequence[int]) -> Response:
    """Parse a token sequence into a :class:`Response`.

    Raises :class:`MissingSection`, :class:`BadArity` or :class:`NoMeta`.
    """
    ids = [int(t) for t in token_ids]
    if len(ids) < 4:
        raise MissingSection("sequence too short")
    think_body, traj_body = _parse_structure(ids)
    bins = _parse_trajectory(traj_body)
    meta = _parse_think(think_body)
    return Response(
        think=VOCAB.render_think(think_body),
        meta=meta,
        trajectory=continuize(bins),
        token_ids=tuple(ids),
    )


def extract_meta(think) -> Optional[MetaAction]:
    """Meta action stated in a think section (text or token ids)."""
    ids = VOCAB.tokenize_think(think) if isinstance(think, str) else list(think)
    return _parse_think(ids)


def build_response(think: str | Sequence[int], trajectory: Trajectory) -> Response:
    """Assemble a grammar-valid response from think content and a trajectory."""
    think_ids = VOCAB.tokenize_think(think) if isinstance(think, str) else [int(t) for t in think]
    bins, _ = discretize(trajectory)
    ids = [VOCAB.THINK_OPEN, *think_ids, VOCAB.THINK_CLOSE, VOCAB.TRAJ_OPEN]
    for k, b in enumerate(bins):
        ids.append(VOCAB.x_token(b) if k % 2 == 0 else VOCAB.y_token(b))
    ids += [VOCAB.TRAJ_CLOSE, VOCAB.EOS]
    return parse(ids)


def serialize(response: Response) -> tuple:
    """Token ids for ``response``; checks that its fields agree."""
    think_ids = VOCAB.tokenize_think(response.think)
    meta = _parse_think(think_ids)
    if meta != response.meta:
        raise ValueError("response meta disagrees with its think section")
    bins, clamped = discretize(response.trajectory)
    if clamped or continuize(bins) != response.trajectory:
        raise ValueError("response trajectory is not on the coordinate grid")
    ids = [VOCAB.THINK_OPEN, *think_ids, VOCAB.THINK_CLOSE, VOCAB.TRAJ_OPEN]
    for k, b in enumerate(bins):
        ids.append(VOCAB.x_token(b) if k % 2 == 0 else VOCAB.y_token(b))
    ids += [VOCAB.TRAJ_CLOSE, VOCAB.EOS]
    ids = tuple(ids)
    if response.token_ids and tuple(response.token_ids) != ids:
        raise ValueError("response token_ids disagree with its fields")
    walk(ids)
    return ids


def render_text(token_ids: Sequence[int]) -> str:
    """Human-readable rendering for logs."""
    v = VOCAB
    ids = list(token_ids)
    try:
        r = parse(ids)
    except GrammarError:
        return " ".join(v.decode(t) if 0 <= t < v.size else f"<unk:{t}>" for t in ids)
    pts = ", ".join(f"({x:.2f}, {y:.2f})" for x, y in r.trajectory.waypoints)
    return f"<think>{r.think}</think><trajectory>{pts}</trajectory>"
