"""Manifests, synthetic VideoQA tasks and run configuration."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frames import DEFAULT_ORDER, ArrangementOrder, FrameSequence, load_frames, write_image
from .model import EncoderConfig, BENCHMARK_CONFIG, TOY_CONFIG
from .vision import Regime

MIN_CANDIDATES, MAX_CANDIDATES = 2, 8


class DataError(ValueError):
    """A manifest record or dataset file is invalid."""


@dataclass
class QAExample:
    id: str
    frames: str | list[str]
    question: str
    candidates: list[str]
    answer_index: int
    root: Path | None = field(default=None, compare=False, repr=False)

    def frame_source(self):
        """Frame directory or file list with relative paths resolved against ``root``."""
        base = self.root or Path(".")
        if isinstance(self.frames, str):
            return base / self.frames
        return [base / f for f in self.frames]

    def load_frames(self) -> FrameSequence:
        return load_frames(self.frame_source())

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "frames": self.frames,
            "question": self.question,
            "candidates": list(self.candidates),
            "answer_index": self.answer_index,
        }


def _validate(rec, lineno: int) -> list[str]:
    if not isinstance(rec, dict):
        return [f"line {lineno}: record is not a JSON object"]
    problems = []
    rid = rec.get("id")
    label = f"line {lineno} (id {rid!r})"
    if not isinstance(rid, str) or not rid:
        problems.append(f"{label}: 'id' must be a non-empty string")
    frames = rec.get("frames")
    if not (
        (isinstance(frames, str) and frames)
        or (isinstance(frames, list) and frames and all(isinstance(f, str) for f in frames))
    ):
        problems.append(f"{label}: 'frames' must be a directory or a non-empty list of files")
    if not isinstance(rec.get("question"), str):
        problems.append(f"{label}: 'question' must be a string")
    cands = rec.get("candidates")
    if not (isinstance(cands, list) and all(isinstance(c, str) for c in cands)):
        problems.append(f"{label}: 'candidates' must be a list of strings")
        cands = None
    elif not MIN_CANDIDATES <= len(cands) <= MAX_CANDIDATES:
        problems.append(f"{label}: 'candidates' needs {MIN_CANDIDATES}-{MAX_CANDIDATES} entries, got {len(cands)}")
    ans = rec.get("answer_index")
    if not isinstance(ans, int) or isinstance(ans, bool):
        problems.append(f"{label}: 'answer_index' must be an integer")
    elif cands is not None and not 0 <= ans < len(cands):
        problems.append(f"{label}: 'answer_index' {ans} out of range for {len(cands)} candidates")
    return problems


def load_manifest(path: str | Path, check_frames: bool = True) -> list[QAExample]:
    """Read a JSON Lines manifest. Relative frame paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    examples, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append(f"line {lineno}: malformed JSON ({exc.msg})")
                continue
            found = _validate(rec, lineno)
            if found:
                problems.extend(found)
                continue
            ex = QAExample(
                rec["id"], rec["frames"], rec["question"], list(rec["candidates"]), rec["answer_index"], root
            )
            if check_frames:
                src = ex.frame_source()
                missing = [str(p) for p in ([src] if isinstance(src, Path) else src) if not p.exists()]
                if missing:
                    problems.append(f"line {lineno} (id {ex.id!r}): missing frames {missing[0]}")
                    continue
            examples.append(ex)
    if problems:
        raise DataError(f"{path}: " + "; ".join(problems))
    return examples


def write_manifest(path: str | Path, examples: list[QAExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- synthetic tasks


class Task(enum.Enum):
    LAST_COLOR = "last-color"
    ORDERED_CELL = "ordered-cell"

    @classmethod
    def parse(cls, text: str) -> "Task":
        key = text.strip().lower().replace("_", "-")
        aliases = {"lastcolor": "last-color", "orderedcell": "ordered-cell"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown task {text!r}; expected last-color or ordered-cell") from None


COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
ORDINALS = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth",
            "tenth", "eleventh", "twelfth", "thirteenth", "fourteenth", "fifteenth", "sixteenth"]
NUM_CHOICES = 4


def ordinal(k: int) -> str:
    return ORDINALS[k - 1] if k <= len(ORDINALS) else f"{k}th"


def cell_names(n: int) -> list[str]:
    """Names of the cells of an n x n frame grid, row-major."""
    if n == 3:
        rows, cols = ["top", "middle", "bottom"], ["left", "center", "right"]
        return [f"{r} {c}" for r in rows for c in cols]
    return [f"row {r + 1} column {c + 1}" for r in range(n) for c in range(n)]


def _choices(rng, gold: str, pool: list[str], position: int) -> list[str]:
    others = [c for c in pool if c != gold]
    picks = [others[i] for i in rng.choice(len(others), NUM_CHOICES - 1, replace=False)]
    picks.insert(position, gold)
    return picks


def _last_color(rng, frames_per_video: int, size: int, position: int):
    names = list(COLORS)
    seq = rng.integers(0, len(names), frames_per_video)
    frames = [np.broadcast_to(np.array(COLORS[names[i]], dtype=np.float32), (size, size, 3)) for i in seq]
    gold = names[seq[-1]]
    cands = _choices(rng, gold, names, position)
    return frames, "what color was the last frame?", cands, position


def _ordered_cell(rng, frames_per_video: int, size: int, position: int):
    n = math.isqrt(frames_per_video)
    names = cell_names(n)
    order = rng.permutation(frames_per_video)
    bounds = [round(k * size / n) for k in range(n + 1)]
    frames = []
    for cell in order:
        img = np.full((size, size, 3), 0.1, dtype=np.float32)
        r, c = divmod(int(cell), n)
        img[bounds[r] : bounds[r + 1], bounds[c] : bounds[c + 1]] = 1.0
        frames.append(img)
    k = int(rng.integers(1, frames_per_video + 1))
    gold = names[order[k - 1]]
    cands = _choices(rng, gold, names, position)
    return frames, f"where did the square appear {ordinal(k)}?", cands, position


def generate_synthetic(
    task: Task | str,
    count: int,
    out_dir: str | Path,
    frames_per_video: int = 9,
    seed: int = 0,
    frame_size: int = 32,
) -> list[QAExample]:
    """Write ``count`` videos as PNG frames plus ``manifest.jsonl`` under ``out_dir``.

    Gold answers are spread evenly over the four answer positions.
    """
    task = Task.parse(task) if isinstance(task, str) else task
    if task is Task.ORDERED_CELL:
        n = math.isqrt(frames_per_video)
        if n * n != frames_per_video or n < 2:
            raise ValueError("ordered-cell needs a perfect-square frame count >= 4")
    rng = np.random.default_rng(seed)
    positions = rng.permutation(np.arange(count) % NUM_CHOICES)
    make = _last_color if task is Task.LAST_COLOR else _ordered_cell

    out_dir = Path(out_dir)
    examples = []
    width = len(str(max(count - 1, 0)))
    for i in range(count):
        frames, question, cands, answer = make(rng, frames_per_video, frame_size, int(positions[i]))
        vid = f"{task.value}-{i:0{width}d}"
        rel = f"videos/{vid}"
        (out_dir / rel).mkdir(parents=True, exist_ok=True)
        for j, frame in enumerate(frames):
            write_image(out_dir / rel / f"frame_{j:03d}.png", frame)
        examples.append(QAExample(vid, rel, question, cands, answer, out_dir))
    write_manifest(out_dir / "manifest.jsonl", examples)
    return examples


# ---------------------------------------------------------------- run configuration


PRESETS = {"toy": TOY_CONFIG, "benchmark": BENCHMARK_CONFIG}


@dataclass(frozen=True)
class RunConfig:
    """Training/evaluation settings. Defaults follow the reference setup."""

    encoder: EncoderConfig = TOY_CONFIG
    order: ArrangementOrder = DEFAULT_ORDER
    regime: Regime = Regime.SINGLE_GRID
    frames: int = 9
    epochs: int = 20
    lr: float = 1e-6
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_pairs(self) -> dict[str, str]:
        pairs = {k: str(v) for k, v in self.encoder.to_dict().items()}
        for f in dataclasses.fields(self):
            if f.name != "encoder":
                v = getattr(self, f.name)
                pairs[f.name] = v.value if isinstance(v, Regime) else str(v)
        return pairs


_ENCODER_KEYS = {f.name for f in dataclasses.fields(EncoderConfig)}
_RUN_PARSERS = {
    "order": ArrangementOrder.parse,
    "regime": Regime.parse,
    "frames": int,
    "epochs": int,
    "lr": float,
    "batch_size": int,
    "seed": int,
    "weight_decay": float,
    "max_grad_norm": float,
    "adam_eps": float,
}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines (``#`` comments allowed) on top of ``base``.

    ``preset = toy|benchmark`` selects the encoder size before other keys apply.
    """
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"config line {lineno}: expected key = value")
        key = key.strip().lower().replace("-", "_")
        if key not in _ENCODER_KEYS and key not in _RUN_PARSERS and key != "preset":
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        pairs[key] = value.strip()

    cfg = base or RunConfig()
    encoder = cfg.encoder
    if "preset" in pairs:
        try:
            encoder = PRESETS[pairs.pop("preset").lower()]
        except KeyError:
            raise DataError(f"unknown preset; expected one of {', '.join(PRESETS)}") from None
    enc_changes = {k: int(v) for k, v in pairs.items() if k in _ENCODER_KEYS}
    if enc_changes:
        encoder = dataclasses.replace(encoder, **enc_changes)
    run_changes = {k: _RUN_PARSERS[k](v) for k, v in pairs.items() if k in _RUN_PARSERS}
    return dataclasses.replace(cfg, encoder=encoder, **run_changes)


def load_config(path: str | Path | None, base: RunConfig | None = None) -> RunConfig:
    if path is None:
        return base or RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"), base)
