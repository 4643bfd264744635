"""Meta-splits, N-way k-shot episode sampling, and sequence encoding.

An episode is a sequence of N*k labelled support windows followed by one
query window. Class slots 0..N-1 are assigned to the chosen gestures by a
fresh permutation per episode, and the support order is shuffled, so the
model can only answer by binding labels from the support set.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Catalog, RecordKey, Recording
from .errors import FormatError, ParameterError, SamplingError
from .preprocessing import PreprocessConfig, PrepStats, apply_prep, butterworth_lowpass, fit_prep_stats, window_count
from .tensor import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "SCENARIOS",
    "SAME_SUBJECT",
    "CROSS_SUBJECT",
    "normalize_scenario",
    "scenario_partition",
    "WindowPool",
    "MetaSplit",
    "build_meta_split",
    "Episode",
    "check_feasible",
    "sample_episode",
    "sample_episodes",
    "encode_task",
    "encode_batch",
    "decode_labels",
    "forward_episodes",
    "batch_arrays",
    "write_replay",
    "read_replay",
    "episodes_from_replay",
]

SCENARIOS = ("new-repetitions", "new-subjects", "new-gestures")
SAME_SUBJECT = "same-subject"
CROSS_SUBJECT = "cross-subject"
SPLITS = ("meta_train", "meta_val", "meta_test")

TRAIN_REPS = (1, 3, 4, 6)
TEST_REPS = (2, 5)


def normalize_scenario(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    aliases = {
        "newrepetitions": "new-repetitions",
        "newsubjects": "new-subjects",
        "newgestures": "new-gestures",
        "repetitions": "new-repetitions",
        "subjects": "new-subjects",
        "gestures": "new-gestures",
    }
    key = aliases.get(key.replace("-", ""), key)
    if key not in SCENARIOS:
        raise ParameterError(f"unknown scenario {name!r}; choose from {{{', '.join(SCENARIOS)}}}")
    return key


def _three_way(items: Sequence[int], train: int, val: int, total: int) -> tuple[list, list, list]:
    """Split sorted ``items`` in the proportions train:val:rest of ``total``.

    With exactly ``total`` items the split is exactly train/val/rest.
    """
    n = len(items)
    n_train = int(round(n * train / total))
    n_val = max(1, int(round(n * val / total)))
    if n_train < 1 or n - n_train - n_val < 1:
        raise SamplingError(f"{n} distinct values cannot be split into non-empty train/val/test groups")
    return list(items[:n_train]), list(items[n_train : n_train + n_val]), list(items[n_train + n_val :])


def scenario_partition(keys: Sequence[RecordKey], scenario: str) -> dict[str, list[RecordKey]]:
    """Assign recordings to meta-train/val/test for a scenario.

    new-subjects: first 27/40 of subjects train, next 5/40 val, rest test.
    new-gestures: first 34/49 of (non-rest) gestures train, next 6/49 val,
    rest test; rest recordings stay in train.
    new-repetitions: repetitions {1,3,4,6} train, {2,5} test, no separate
    val recordings (validation episodes are drawn from the train pool).
    """
    scenario = normalize_scenario(scenario)
    keys = [RecordKey(*k) for k in keys]
    out: dict[str, list[RecordKey]] = {s: [] for s in SPLITS}
    if scenario == "new-repetitions":
        reps = {k.repetition for k in keys}
        if not reps & set(TRAIN_REPS) or not reps & set(TEST_REPS):
            raise SamplingError(f"new-repetitions needs repetitions from {TRAIN_REPS} and {TEST_REPS}; catalog has {sorted(reps)}")
        for k in keys:
            out["meta_train" if k.repetition in TRAIN_REPS else "meta_test"].append(k)
        return out
    if scenario == "new-subjects":
        subjects = sorted({k.subject for k in keys})
        groups = _three_way(subjects, 27, 5, 40)
        lookup = {s: name for name, grp in zip(SPLITS, groups) for s in grp}
        for k in keys:
            out[lookup[k.subject]].append(k)
        return out
    gestures = sorted({k.gesture for k in keys if k.gesture != 0})
    groups = _three_way(gestures, 34, 6, 49)
    lookup = {g: name for name, grp in zip(SPLITS, groups) for g in grp}
    lookup[0] = "meta_train"
    for k in keys:
        out[lookup[k.gesture]].append(k)
    return out


# ---------------------------------------------------------------------------
# window pools
# ---------------------------------------------------------------------------


class WindowPool:
    """All sliding windows of a set of preprocessed recordings.

    Windows are addressed by a global integer id and materialized on demand
    as slices of the underlying recordings.
    """

    def __init__(self, signals: Mapping[RecordKey, np.ndarray], window: int, step: int, name: str = ""):
        self.name = name
        self.window = window
        self.step = step
        self.keys: list[RecordKey] = sorted(signals)
        self.signals = [signals[k] for k in self.keys]
        counts = [window_count(s.shape[0], window, step) for s in self.signals]
        self.rec_of = np.repeat(np.arange(len(self.keys)), counts).astype(np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.local_of = np.arange(int(starts[-1]), dtype=np.int64) - np.repeat(starts[:-1], counts)
        self._start = {k: int(starts[i]) for i, k in enumerate(self.keys)}
        self._count = {k: c for k, c in zip(self.keys, counts)}
        by_sg: dict[int, dict[int, list[np.ndarray]]] = {}
        for k, st, c in zip(self.keys, starts[:-1], counts):
            if c:
                by_sg.setdefault(k.subject, {}).setdefault(k.gesture, []).append(np.arange(st, st + c))
        self.by_subject = {s: {g: np.concatenate(v) for g, v in gs.items()} for s, gs in by_sg.items()}
        self.n_channels = self.signals[0].shape[1] if self.signals else 0

    def __len__(self) -> int:
        return int(self.rec_of.size)

    def subjects(self) -> list[int]:
        return sorted(self.by_subject)

    def gestures(self) -> list[int]:
        return sorted({g for gs in self.by_subject.values() for g in gs})

    def window_id(self, key: RecordKey, index: int) -> int:
        key = RecordKey(*key)
        if key not in self._start or not 0 <= index < self._count[key]:
            raise SamplingError(f"window {index} of recording {tuple(key)} is not in pool {self.name!r}")
        return self._start[key] + index

    def provenance(self, wid: int) -> tuple[int, int, int, int]:
        k = self.keys[self.rec_of[wid]]
        return k.subject, k.gesture, k.repetition, int(self.local_of[wid])

    def windows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        out = np.empty(ids.shape + (self.window, self.n_channels), dtype=np.float32)
        for pos, wid in np.ndenumerate(ids):
            start = self.local_of[wid] * self.step
            out[pos] = self.signals[self.rec_of[wid]][start : start + self.window]
        return out

    def restrict(self, gestures=None, subjects=None, name=None) -> "WindowPool":
        keep = {
            k: s
            for k, s in zip(self.keys, self.signals)
            if (gestures is None or k.gesture in gestures) and (subjects is None or k.subject in subjects)
        }
        return WindowPool(keep, self.window, self.step, name or self.name)


@dataclass
class MetaSplit:
    scenario: str
    meta_train: WindowPool
    meta_val: WindowPool
    meta_test: WindowPool
    stats: PrepStats
    prep: PreprocessConfig
    val_from_train: bool = False
    clamped: dict[str, float] = field(default_factory=dict)

    def pool(self, split: str) -> WindowPool:
        split = {"train": "meta_train", "val": "meta_val", "test": "meta_test"}.get(split, split)
        if split not in SPLITS:
            raise ParameterError(f"unknown split {split!r}; choose from train, val, test")
        return getattr(self, split)


def build_meta_split(
    source: Catalog | Mapping[RecordKey, Recording],
    scenario: str,
    include_rest: bool = False,
    prep: PreprocessConfig | None = None,
) -> MetaSplit:
    """Preprocess recordings and organize their windows for one scenario.

    Normalization statistics are fitted on the meta-train recordings only.
    """
    scenario = normalize_scenario(scenario)
    prep = prep or PreprocessConfig()
    keys = list(source.keys())
    if not include_rest:
        keys = [k for k in keys if RecordKey(*k).gesture != 0]
    if not keys:
        raise SamplingError("no recordings available to build a meta-split")
    parts = scenario_partition(keys, scenario)

    def load(k):
        rec = source.load(k) if isinstance(source, Catalog) else source[k]
        if abs(rec.fs - prep.fs) > 1e-9:
            raise ParameterError(f"recording {tuple(k)} sampled at {rec.fs} Hz, preprocessing expects {prep.fs} Hz")
        return butterworth_lowpass(rec.samples, prep.fs, prep.cutoff_hz)

    filtered = {k: load(k) for k in keys}
    stats = fit_prep_stats((filtered[k] for k in parts["meta_train"]), prep)
    pools, clamped = {}, {}
    for split in SPLITS:
        signals, n_clamped, n_total = {}, 0, 0
        for k in parts[split]:
            signals[k], n = apply_prep(filtered.pop(k), stats, prep)
            n_clamped += n
            n_total += signals[k].size
        pools[split] = WindowPool(signals, prep.window_samples, prep.step_samples, split)
        clamped[split] = n_clamped / n_total if n_total else 0.0
    val_from_train = scenario == "new-repetitions"
    if val_from_train:
        pools["meta_val"] = pools["meta_train"]
        clamped["meta_val"] = clamped["meta_train"]
    return MetaSplit(scenario, pools["meta_train"], pools["meta_val"], pools["meta_test"], stats, prep, val_from_train, clamped)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    support_ids: np.ndarray  # (N*k,) window ids in sequence order
    support_labels: np.ndarray  # (N*k,) class slots
    query_id: int
    query_label: int
    slot_gestures: list[int]  # gesture id behind each slot
    mode: str
    provenance: list[tuple[int, int, int, int]]  # (subject, gesture, repetition, window) per position
    windows: np.ndarray | None = None  # (N*k+1, W, C) when materialized

    @property
    def n_way(self) -> int:
        return len(self.slot_gestures)

    @property
    def ids(self) -> np.ndarray:
        return np.append(self.support_ids, self.query_id)


def _eligible(classes: Mapping[int, np.ndarray], need: int) -> list[int]:
    return sorted(g for g, ids in classes.items() if ids.size >= need)


def check_feasible(pool: WindowPool, n_way: int, k_shot: int, mode: str = SAME_SUBJECT) -> None:
    """Raise SamplingError (naming the deficient class) if episodes cannot be drawn."""
    need = k_shot + 1
    if mode == SAME_SUBJECT:
        best_subject, best = None, []
        for s, classes in pool.by_subject.items():
            ok = _eligible(classes, need)
            if len(ok) >= n_way:
                return
            if best_subject is None or len(ok) > len(best):
                best_subject, best = s, ok
        if best_subject is None:
            raise SamplingError(f"pool {pool.name!r} is empty; cannot sample {n_way}-way {k_shot}-shot episodes")
        classes = pool.by_subject[best_subject]
        short = sorted((ids.size, g) for g, ids in classes.items() if ids.size < need)
        detail = f"; gesture {short[0][1]} has only {short[0][0]} windows (need {need})" if short else ""
        raise SamplingError(
            f"pool {pool.name!r}: no subject has {n_way} gestures with >= {need} windows "
            f"(best: subject {best_subject} with {len(best)} eligible of {len(classes)}){detail}"
        )
    if mode == CROSS_SUBJECT:
        gestures = {g for classes in pool.by_subject.values() for g in _eligible(classes, need)}
        if len(gestures) >= n_way:
            return
        all_g = pool.gestures()
        missing = [g for g in all_g if g not in gestures]
        detail = f"; gesture {missing[0]} has no subject with >= {need} windows" if missing else ""
        raise SamplingError(f"pool {pool.name!r}: only {len(gestures)} eligible gestures for {n_way}-way {k_shot}-shot{detail}")
    raise ParameterError(f"unknown sampling mode {mode!r}; choose {SAME_SUBJECT} or {CROSS_SUBJECT}")


def sample_episode(
    pool: WindowPool,
    n_way: int,
    k_shot: int,
    mode: str = SAME_SUBJECT,
    rng: np.random.Generator | None = None,
    label_shuffle: bool = True,
    materialize: bool = True,
) -> Episode:
    """Draw one N-way k-shot episode.

    same-subject: one subject supplies all N classes.
    cross-subject: each class is drawn from its own randomly chosen subject.
    """
    rng = rng or np.random.default_rng()
    need = k_shot + 1
    if mode == SAME_SUBJECT:
        subjects = [s for s in sorted(pool.by_subject) if len(_eligible(pool.by_subject[s], need)) >= n_way]
        if not subjects:
            check_feasible(pool, n_way, k_shot, mode)
        subject = subjects[rng.integers(len(subjects))]
        classes = pool.by_subject[subject]
        gestures = rng.choice(_eligible(classes, need), size=n_way, replace=False)
        sources = [classes[g] for g in gestures]
    elif mode == CROSS_SUBJECT:
        owners: dict[int, list[int]] = {}
        for s in sorted(pool.by_subject):
            for g in _eligible(pool.by_subject[s], need):
                owners.setdefault(g, []).append(s)
        if len(owners) < n_way:
            check_feasible(pool, n_way, k_shot, mode)
        gestures = rng.choice(sorted(owners), size=n_way, replace=False)
        sources = []
        for g in gestures:
            subs = owners[g]
            sources.append(pool.by_subject[subs[rng.integers(len(subs))]][g])
    else:
        raise ParameterError(f"unknown sampling mode {mode!r}; choose {SAME_SUBJECT} or {CROSS_SUBJECT}")

    gestures = [int(g) for g in gestures]
    if label_shuffle:
        slots = rng.permutation(n_way)
    else:
        slots = np.argsort(np.argsort(gestures))
    query_class = int(rng.integers(n_way))

    ids, labels, query_id = [], [], -1
    for i, src in enumerate(sources):
        take = need if i == query_class else k_shot
        picked = rng.choice(src, size=take, replace=False)
        if i == query_class:
            query_id = int(picked[-1])
            picked = picked[:-1]
        ids.extend(int(p) for p in picked)
        labels.extend([int(slots[i])] * k_shot)
    order = rng.permutation(len(ids))
    support_ids = np.asarray(ids, dtype=np.int64)[order]
    support_labels = np.asarray(labels, dtype=np.int64)[order]
    slot_gestures = [0] * n_way
    for i, g in enumerate(gestures):
        slot_gestures[int(slots[i])] = g
    all_ids = np.append(support_ids, query_id)
    ep = Episode(
        support_ids=support_ids,
        support_labels=support_labels,
        query_id=query_id,
        query_label=int(slots[query_class]),
        slot_gestures=slot_gestures,
        mode=mode,
        provenance=[pool.provenance(int(w)) for w in all_ids],
    )
    if materialize:
        ep.windows = pool.windows(all_ids)
    return ep


EPISODE_CHUNK = 64


def sample_episodes(
    pool: WindowPool,
    n_episodes: int,
    n_way: int,
    k_shot: int,
    mode: str = SAME_SUBJECT,
    seed: int = 0,
    label_shuffle: bool = True,
    materialize: bool = True,
    workers: int = 1,
) -> list[Episode]:
    """A reproducible episode stream.

    Episodes are generated in fixed-size chunks, each with its own RNG
    derived from (seed, chunk index); the result is identical for any
    number of workers.
    """
    check_feasible(pool, n_way, k_shot, mode)
    n_chunks = -(-n_episodes // EPISODE_CHUNK)

    def chunk(c):
        rng = np.random.default_rng([seed, c])
        size = min(EPISODE_CHUNK, n_episodes - c * EPISODE_CHUNK)
        return [sample_episode(pool, n_way, k_shot, mode, rng, label_shuffle, materialize) for _ in range(size)]

    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(chunk, range(n_chunks)))
    else:
        parts = [chunk(c) for c in range(n_chunks)]
    return [ep for part in parts for ep in part]


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def _label_block(support_labels: np.ndarray, n_way: int, dtype) -> np.ndarray:
    """(..., N, l) one-hot columns for the support positions, zeros for the query."""
    support_labels = np.asarray(support_labels)
    lead, nk = support_labels.shape[:-1], support_labels.shape[-1]
    block = np.zeros(lead + (n_way, nk + 1), dtype=dtype)
    onehot = np.eye(n_way, dtype=dtype)[support_labels]  # (..., nk, N)
    block[..., :nk] = np.swapaxes(onehot, -1, -2)
    return block


def encode_batch(windows, support_labels, embed_fn: Callable, n_way: int) -> Tensor:
    """Embed every window and append label blocks.

    windows: (..., l, W, C); support_labels: (..., l-1).
    Returns (..., feature_dim + N, l) with the query (last) column carrying
    an all-zero label block.
    """
    feats = embed_fn(windows)  # (..., l, D)
    cols = T.swap_last(feats)  # (..., D, l)
    labels = Tensor(_label_block(support_labels, n_way, cols.dtype))
    return T.concat_channels(cols, labels)


def encode_task(episode: Episode, embed_fn: Callable, n_way: int | None = None) -> Tensor:
    """(feature_dim + N, N*k + 1) sequence for one materialized episode."""
    if episode.windows is None:
        raise ParameterError("episode windows were not materialized")
    return encode_batch(episode.windows, episode.support_labels, embed_fn, n_way or episode.n_way)


def decode_labels(encoded, n_way: int) -> np.ndarray:
    """Recover the support slot labels from an encoded task's label rows."""
    data = encoded.data if isinstance(encoded, Tensor) else np.asarray(encoded)
    block = data[..., -n_way:, :-1]
    return np.argmax(block, axis=-2)


def batch_arrays(episodes: Sequence[Episode]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack materialized episodes into (windows, support_labels, query_labels)."""
    windows = np.stack([ep.windows for ep in episodes])
    support = np.stack([ep.support_labels for ep in episodes])
    query = np.array([ep.query_label for ep in episodes], dtype=np.int64)
    return windows, support, query


def forward_episodes(windows, support_labels, cfg, params, query_index: int = -1) -> Tensor:
    """Logits (..., N) for a batch of episodes given as raw arrays."""
    from .layers import embed, model_forward

    encoded = encode_batch(windows, support_labels, lambda w: embed(w, cfg.embedding, params), cfg.n_way)
    return model_forward(encoded, cfg, params, query_index)


# ---------------------------------------------------------------------------
# FSEP replay files
#   b"FSEP", u16 version, u64 seed, u16 N, u16 k, u8 mode (0 same, 1 cross),
#   u32 n_episodes, then per episode: u8 query_label and N*k+1 records of
#   (u16 subject, u16 gesture, u16 repetition, u32 window index, u8 slot)
#   with slot 255 marking the query position.
# ---------------------------------------------------------------------------

REPLAY_MAGIC = b"FSEP"
_REPLAY_HEAD = struct.Struct("<4sHQHHBI")
_REPLAY_ITEM = struct.Struct("<HHHIB")


def write_replay(path, episodes: Sequence[Episode], seed: int, n_way: int, k_shot: int) -> None:
    mode = episodes[0].mode if episodes else SAME_SUBJECT
    out = [_REPLAY_HEAD.pack(REPLAY_MAGIC, 1, seed, n_way, k_shot, 0 if mode == SAME_SUBJECT else 1, len(episodes))]
    for ep in episodes:
        out.append(struct.pack("<B", ep.query_label))
        slots = list(ep.support_labels) + [255]
        for (s, g, r, w), slot in zip(ep.provenance, slots):
            out.append(_REPLAY_ITEM.pack(s, g, r, w, int(slot)))
    Path(path).write_bytes(b"".join(out))


@dataclass
class Replay:
    seed: int
    n_way: int
    k_shot: int
    mode: str
    episodes: list[tuple[int, list[tuple[int, int, int, int, int]]]]


def read_replay(path) -> Replay:
    buf = Path(path).read_bytes()
    if buf[:4] != REPLAY_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {REPLAY_MAGIC!r}", offset=0, path=path)
    if len(buf) < _REPLAY_HEAD.size:
        raise FormatError("truncated replay header", offset=len(buf), path=path)
    _, version, seed, n, k, mode, count = _REPLAY_HEAD.unpack_from(buf)
    if version != 1:
        raise FormatError(f"unsupported replay version {version}", offset=4, path=path)
    l = n * k + 1
    per = 1 + l * _REPLAY_ITEM.size
    expected = _REPLAY_HEAD.size + count * per
    if len(buf) != expected:
        raise FormatError(f"replay length {len(buf)} does not match {count} episodes ({expected} bytes)", offset=min(len(buf), expected), path=path)
    eps, pos = [], _REPLAY_HEAD.size
    for _ in range(count):
        q = buf[pos]
        pos += 1
        items = [_REPLAY_ITEM.unpack_from(buf, pos + i * _REPLAY_ITEM.size) for i in range(l)]
        pos += l * _REPLAY_ITEM.size
        eps.append((q, items))
    return Replay(seed, n, k, SAME_SUBJECT if mode == 0 else CROSS_SUBJECT, eps)


def episodes_from_replay(pool: WindowPool, replay: Replay, materialize: bool = True) -> list[Episode]:
    """Rebuild the exact episodes recorded in a replay file."""
    out = []
    for q, items in replay.episodes:
        ids = [pool.window_id(RecordKey(s, g, r), w) for s, g, r, w, _ in items]
        labels = np.array([slot for *_, slot in items[:-1]], dtype=np.int64)
        slot_gestures = [0] * replay.n_way
        for (s, g, r, w, slot) in items[:-1]:
            slot_gestures[slot] = g
        ep = Episode(
            support_ids=np.array(ids[:-1], dtype=np.int64),
            support_labels=labels,
            query_id=ids[-1],
            query_label=int(q),
            slot_gestures=slot_gestures,
            mode=replay.mode,
            provenance=[(s, g, r, w) for s, g, r, w, _ in items],
        )
        if materialize:
            ep.windows = pool.windows(ep.ids)
        out.append(ep)
    return out
