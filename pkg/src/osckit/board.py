"""Calibration-board data model and observation corpus serialization.

The toolkit ingests circle-center detections from files rather than running a
detector; the corpus format defined here is the system boundary. Serialization
is canonical: observations sorted by (image_id, view), decimal floats, so a
load/save round trip is byte identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvariantViolation, ParseError
from .model import PixelPoint

VIEWS = ("upper", "lower")


@dataclass(frozen=True)
class BoardSpec:
    """Circle-grid geometry: rows x cols centers, pitch meters apart."""

    rows: int
    cols: int
    pitch: float

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise InvariantViolation("board must be at least 2x2")
        if not (np.isfinite(self.pitch) and self.pitch > 0):
            raise InvariantViolation("board pitch must be positive")


@dataclass(frozen=True, eq=False)
class BoardObservation:
    """Detected circle centers of one board in one view.

    points is a list of ((row, col), PixelPoint) pairs; grid indices are
    unique and pixels lie inside the sensor rectangle.
    """

    image_id: str
    view: str
    points: tuple

    def __post_init__(self):
        if self.view not in VIEWS:
            raise InvariantViolation(f"view must be one of {VIEWS}, got {self.view!r}")
        pts = tuple(
            ((int(r), int(c)), PixelPoint(float(u), float(v)))
            for (r, c), (u, v) in self.points
        )
        if len(pts) < 4:
            raise InvariantViolation(
                f"observation {self.image_id}/{self.view} has fewer than 4 points"
            )
        idx = [gi for gi, _ in pts]
        if len(set(idx)) != len(idx):
            raise InvariantViolation(
                f"observation {self.image_id}/{self.view} has duplicate grid indices"
            )
        object.__setattr__(self, "points", pts)

    def grid_indices(self) -> np.ndarray:
        return np.array([gi for gi, _ in self.points], dtype=int)

    def pixels(self) -> np.ndarray:
        return np.array([px for _, px in self.points], dtype=float)


@dataclass(frozen=True, eq=False)
class ObservationCorpus:
    """A set of board observations plus the board and sensor geometry."""

    board: BoardSpec
    sensor_width: int
    sensor_height: int
    observations: tuple = field(default_factory=tuple)

    def __post_init__(self):
        obs = tuple(self.observations)
        if not obs:
            raise InvariantViolation("corpus must contain at least one observation")
        seen = set()
        for o in obs:
            key = (o.image_id, o.view)
            if key in seen:
                raise InvariantViolation(f"duplicate (image_id, view) pair {key}")
            seen.add(key)
            for (r, c), (u, v) in o.points:
                if not (0 <= r < self.board.rows and 0 <= c < self.board.cols):
                    raise InvariantViolation(
                        f"grid index ({r},{c}) outside board bounds in "
                        f"{o.image_id}/{o.view}"
                    )
                if not (0 <= u < self.sensor_width and 0 <= v < self.sensor_height):
                    raise InvariantViolation(
                        f"pixel ({u},{v}) outside sensor rectangle in "
                        f"{o.image_id}/{o.view}"
                    )
        object.__setattr__(self, "observations", obs)

    def __len__(self):
        return len(self.observations)


def board_model_points(spec: BoardSpec) -> np.ndarray:
    """Board-frame center positions, row major: (col*pitch, row*pitch, 0)."""
    cols, rows = np.meshgrid(np.arange(spec.cols), np.arange(spec.rows))
    return np.stack(
        [cols.ravel() * spec.pitch, rows.ravel() * spec.pitch,
         np.zeros(spec.rows * spec.cols)],
        axis=-1,
    )


def grid_points_for(spec: BoardSpec, grid_indices: np.ndarray) -> np.ndarray:
    """Board-frame positions for explicit (row, col) indices."""
    gi = np.asarray(grid_indices, dtype=int)
    return np.stack(
        [gi[:, 1] * spec.pitch, gi[:, 0] * spec.pitch, np.zeros(len(gi))], axis=-1
    )


def _corpus_to_obj(corpus: ObservationCorpus) -> dict:
    obs_sorted = sorted(corpus.observations, key=lambda o: (o.image_id, o.view))
    return {
        "board": {
            "rows": corpus.board.rows,
            "cols": corpus.board.cols,
            "pitch": corpus.board.pitch,
        },
        "sensor": {"width": corpus.sensor_width, "height": corpus.sensor_height},
        "observations": [
            {
                "image_id": o.image_id,
                "view": o.view,
                "points": [
                    {"row": r, "col": c, "u": u, "v": v}
                    for (r, c), (u, v) in o.points
                ],
            }
            for o in obs_sorted
        ],
    }


def corpus_to_json(corpus: ObservationCorpus) -> str:
    """Canonical serialization; stable bytes for identical corpora."""
    return json.dumps(_corpus_to_obj(corpus), indent=1)


def save_corpus(corpus: ObservationCorpus, path) -> None:
    Path(path).write_text(corpus_to_json(corpus))


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ParseError(f"missing key {key!r} in {where}")
    return obj[key]


def corpus_from_obj(obj: dict) -> ObservationCorpus:
    board = _require(obj, "board", "corpus")
    sensor = _require(obj, "sensor", "corpus")
    raw_obs = _require(obj, "observations", "corpus")
    try:
        spec = BoardSpec(
            rows=int(_require(board, "rows", "board")),
            cols=int(_require(board, "cols", "board")),
            pitch=float(_require(board, "pitch", "board")),
        )
        observations = []
        for i, o in enumerate(raw_obs):
            where = f"observations[{i}]"
            pts = [
                ((int(p["row"]), int(p["col"])), (float(p["u"]), float(p["v"])))
                for p in _require(o, "points", where)
            ]
            observations.append(
                BoardObservation(
                    image_id=str(_require(o, "image_id", where)),
                    view=str(_require(o, "view", where)),
                    points=tuple(pts),
                )
            )
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"malformed corpus: {e}") from e
    return ObservationCorpus(
        board=spec,
        sensor_width=int(_require(sensor, "width", "sensor")),
        sensor_height=int(_require(sensor, "height", "sensor")),
        observations=tuple(observations),
    )


def load_corpus(path) -> ObservationCorpus:
    """Load a corpus file; invariants are checked, never silently repaired."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"corpus file does not exist: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    return corpus_from_obj(obj)


def split_views(corpus: ObservationCorpus):
    """Partition by view tag.

    Returns (upper corpus or None, lower corpus or None, sorted image_ids
    present in both partitions).
    """
    upper = tuple(o for o in corpus.observations if o.view == "upper")
    lower = tuple(o for o in corpus.observations if o.view == "lower")
    shared = sorted(
        {o.image_id for o in upper} & {o.image_id for o in lower}
    )

    def mk(obs):
        if not obs:
            return None
        return ObservationCorpus(
            board=corpus.board,
            sensor_width=corpus.sensor_width,
            sensor_height=corpus.sensor_height,
            observations=obs,
        )

    return mk(upper), mk(lower), shared
