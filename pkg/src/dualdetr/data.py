"""Synthetic videos, feature/annotation files and sliding windows."""
from __future__ import annotations

import math
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyInputError, FormatError

FEATURE_MAGIC = b"DDTRFEAT"
_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True)
class ActionInstance:
    start: float
    end: float
    label: int


@dataclass
class VideoRecord:
    video_id: str
    features: np.ndarray                 # T x D float32
    annotations: list[ActionInstance]
    duration_seconds: float
    snippet_stride_seconds: float

    def __post_init__(self):
        for a in self.annotations:
            if not (0 <= a.start < a.end <= self.duration_seconds + 1e-9):
                raise ConfigError(f"{self.video_id}: annotation {a} outside [0, duration]")

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class Window:
    video_id: str
    start: int                   # first snippet index
    length: int                  # W
    features: np.ndarray         # W x D, zero-padded
    mask: np.ndarray             # W bool, True for real snippets
    intervals: np.ndarray        # K x 2 window-normalized
    labels: np.ndarray           # K int64
    offset_seconds: float = 0.0
    span_seconds: float = 0.0
    num_classes: int = 0
    meta: dict = field(default_factory=dict)


# -- synthetic generator -------------------------------------------------------

def raised_cosine(length: int) -> np.ndarray:
    """Envelope over ``length`` snippets, strictly positive inside, peak near the middle."""
    t = (np.arange(length) + 0.5) / length
    return 0.5 * (1 - np.cos(2 * np.pi * t))


def class_signatures(seed: int, num_classes: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    u = rng.standard_normal((num_classes, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def synth_generate(seed: int, num_videos: int, num_classes: int, T: int, D: int,
                   overlap_level: int = 2, noise_sigma: float = 0.1,
                   snippet_seconds: float = 0.5, min_instances: int = 3,
                   max_instances: int = 12, first_index: int = 0) -> list[VideoRecord]:
    """Multi-label videos built from per-class unit signatures under raised-cosine envelopes.

    Video ``i`` depends only on (seed, i), so ``first_index`` yields further
    videos of the same task (held-out splits) without touching earlier ones.
    """
    if num_classes < 1:
        raise ConfigError("num_classes must be at least 1")
    if overlap_level < 1:
        raise ConfigError(f"overlap_level={overlap_level} admits no action at all")
    if T < 20:
        raise ConfigError(f"T={T} too short for 5-20% durations of at least two snippets")
    if not 1 <= min_instances <= max_instances:
        raise ConfigError("need 1 <= min_instances <= max_instances")
    sig = class_signatures(seed, num_classes, D)
    min_len = max(2, math.ceil(0.05 * T))
    max_len = max(min_len, int(0.2 * T))
    videos = []
    for i in range(first_index, first_index + num_videos):
        rng = np.random.default_rng([seed, 1, i])
        wanted = int(rng.integers(min_instances, max_instances + 1))
        active = np.zeros(T, dtype=np.int64)
        busy = np.zeros((num_classes, T), dtype=bool)
        placed: list[tuple[int, int, int]] = []
        for _ in range(wanted):
            for _attempt in range(100):
                c = int(rng.integers(num_classes))
                L = int(rng.integers(min_len, max_len + 1))
                a = int(rng.integers(0, T - L + 1))
                b = a + L
                # same-class instances keep a one-snippet gap so they stay separable
                if (active[a:b] < overlap_level).all() and not busy[c, max(0, a - 1):b + 1].any():
                    active[a:b] += 1
                    busy[c, a:b] = True
                    placed.append((a, b, c))
                    break
        if len(placed) < min_instances:
            raise ConfigError(
                f"video {i}: placed {len(placed)} of {wanted} instances; "
                f"overlap_level={overlap_level} is infeasible for T={T}")
        feats = np.zeros((T, D))
        for a, b, c in placed:
            feats[a:b] += raised_cosine(b - a)[:, None] * sig[c][None, :]
        if noise_sigma > 0:
            feats += rng.normal(0.0, noise_sigma, size=(T, D))
        placed.sort()
        anns = [ActionInstance(a * snippet_seconds, b * snippet_seconds, c) for a, b, c in placed]
        videos.append(VideoRecord(f"video_{i:05d}", feats.astype(np.float32), anns,
                                  T * snippet_seconds, snippet_seconds))
    return videos


# -- file formats ------------------------------------------------------------------

def save_features(path: str | Path, X: np.ndarray) -> None:
    X = np.asarray(X, dtype="<f4")
    if X.ndim != 2:
        raise FormatError(f"features must be 2-D, got shape {X.shape}")
    T, D = X.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, T, D))
        fh.write(np.ascontiguousarray(X).tobytes())


def load_features(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(buf)}")
    magic, T, D = _HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {FEATURE_MAGIC!r}")
    if T == 0:
        raise EmptyInputError(f"{path}: empty feature sequence (T = 0)")
    if D == 0:
        raise EmptyInputError(f"{path}: zero feature width (D = 0)")
    payload = T * D * 4
    if payload > sys.maxsize - _HEADER.size:
        raise FormatError(f"{path}: T*D = {T}*{D} overflows the addressable size")
    expected = _HEADER.size + payload
    if len(buf) != expected:
        raise FormatError(
            f"{path}: payload size mismatch at byte {_HEADER.size}: expected {expected} bytes "
            f"total for T={T}, D={D}, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(T, D).astype(np.float32)


def load_vocabulary(path: str | Path) -> list[str]:
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


def save_vocabulary(path: str | Path, names: list[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def parse_annotations(text: str, num_classes: int | None = None,
                      source: str = "<annotations>") -> dict[str, list[ActionInstance]]:
    out: dict[str, list[ActionInstance]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise FormatError(f"{source}:{lineno}: expected 4 fields, got {len(parts)}")
        vid, s, e, c = parts
        try:
            start, end, label = float(s), float(e), int(c)
        except ValueError:
            raise FormatError(f"{source}:{lineno}: cannot parse {line!r}") from None
        if not (math.isfinite(start) and math.isfinite(end)):
            raise FormatError(f"{source}:{lineno}: non-finite time")
        if end <= start:
            raise FormatError(f"{source}:{lineno}: end {end} <= start {start} (zero or negative duration)")
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise FormatError(f"{source}:{lineno}: unknown class id {label}")
        out.setdefault(vid, []).append(ActionInstance(start, end, label))
    return out


def load_annotations(path: str | Path, vocabulary: str | Path | None = None) -> dict[str, list[ActionInstance]]:
    """Read ``video_id,start_seconds,end_seconds,class_id`` records.

    The class vocabulary defaults to ``classes.txt`` next to the file.
    """
    path = Path(path)
    vocab_path = Path(vocabulary) if vocabulary else path.parent / "classes.txt"
    num_classes = len(load_vocabulary(vocab_path)) if vocab_path.exists() else None
    return parse_annotations(path.read_text(encoding="utf-8"), num_classes, str(path))


def format_annotations(videos: list[VideoRecord]) -> str:
    lines = ["# video_id,start_seconds,end_seconds,class_id"]
    for v in videos:
        lines += [f"{v.video_id},{a.start:.6f},{a.end:.6f},{a.label}" for a in v.annotations]
    return "\n".join(lines) + "\n"


# -- windowing -------------------------------------------------------------------

def window_starts(T: int, W: int, stride_ratio: float) -> list[int]:
    if W <= 0:
        raise ConfigError(f"window length must be positive, got {W}")
    stride = round(W * stride_ratio)
    if stride < 1:
        raise ConfigError(f"stride round({W}*{stride_ratio}) must be at least 1")
    if T <= W:
        return [0]
    starts = list(range(0, T - W + 1, stride))
    if starts[-1] + W < T:
        starts.append(T - W)
    return starts


def make_windows(video: VideoRecord, W: int, stride_ratio: float,
                 num_classes: int = 0) -> list[Window]:
    T, D = video.features.shape
    ss = video.snippet_stride_seconds
    windows = []
    for w0 in window_starts(T, W, stride_ratio):
        feats = np.zeros((W, D), dtype=np.float32)
        n = min(W, T - w0)
        feats[:n] = video.features[w0:w0 + n]
        mask = np.zeros(W, dtype=bool)
        mask[:n] = True
        ivs, labels = [], []
        for a in video.annotations:
            s = max(a.start / ss, w0)
            e = min(a.end / ss, w0 + W)
            if e - s >= 1.0 - 1e-9:
                ivs.append(((s - w0) / W, (e - w0) / W))
                labels.append(a.label)
        windows.append(Window(
            video.video_id, w0, W, feats, mask,
            np.asarray(ivs, dtype=np.float64).reshape(-1, 2),
            np.asarray(labels, dtype=np.int64), w0 * ss, W * ss, num_classes))
    return windows


def window_to_seconds(win: Window, intervals: np.ndarray) -> np.ndarray:
    return win.offset_seconds + np.asarray(intervals) * win.span_seconds


# -- dataset directories -----------------------------------------------------------

MANIFEST_HEADER = "video_id\tsplit\tT\tD\tduration_seconds\tsnippet_seconds\tsha256"


def write_dataset(root: str | Path, splits: dict[str, list[VideoRecord]],
                  class_names: list[str]) -> Path:
    """Write features/, annotations.csv, classes.txt and manifest.tsv under ``root``."""
    import hashlib

    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    rows = [MANIFEST_HEADER]
    everything = []
    for split, videos in splits.items():
        for v in videos:
            fpath = root / "features" / f"{v.video_id}.feat"
            save_features(fpath, v.features)
            digest = hashlib.sha256(fpath.read_bytes()).hexdigest()
            T, D = v.features.shape
            rows.append(f"{v.video_id}\t{split}\t{T}\t{D}\t{v.duration_seconds:.6f}\t"
                        f"{v.snippet_stride_seconds:.6f}\t{digest}")
            everything.append(v)
    (root / "annotations.csv").write_text(format_annotations(everything), encoding="utf-8")
    save_vocabulary(root / "classes.txt", class_names)
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest


def read_dataset(root: str | Path, split: str | None = None) -> list[VideoRecord]:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise FormatError(f"{root}: no manifest.tsv")
    anns = load_annotations(root / "annotations.csv", root / "classes.txt")
    videos = []
    lines = manifest.read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise FormatError(f"{manifest}:{lineno}: expected 7 columns")
        vid, sp, _T, _D, dur, ss, _digest = parts
        if split is not None and sp != split:
            continue
        feats = load_features(root / "features" / f"{vid}.feat")
        videos.append(VideoRecord(vid, feats, anns.get(vid, []), float(dur), float(ss)))
    return videos
