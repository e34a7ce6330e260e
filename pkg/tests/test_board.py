"""Board geometry and observation corpus serialization tests."""

import numpy as np
import pytest

from osckit.board import (
    BoardObservation,
    BoardSpec,
    ObservationCorpus,
    board_model_points,
    load_corpus,
    save_corpus,
    split_views,
)
from osckit.errors import InvariantViolation, ParseError


def make_obs(image_id, view, n=5, offset=0.0):
    pts = tuple(
        ((i // 3, i % 3), (100.0 + 10 * i + offset, 200.0 + 5 * i))
        for i in range(n)
    )
    return BoardObservation(image_id=image_id, view=view, points=pts)


def make_corpus(obs):
    return ObservationCorpus(
        board=BoardSpec(rows=7, cols=10, pitch=0.03),
        sensor_width=4912,
        sensor_height=3684,
        observations=tuple(obs),
    )


class TestBoardModelPoints:
    def test_2x2(self):
        pts = board_model_points(BoardSpec(rows=2, cols=2, pitch=0.05))
        assert np.allclose(
            pts, [(0, 0, 0), (0.05, 0, 0), (0, 0.05, 0), (0.05, 0.05, 0)]
        )

    def test_degenerate_spec_rejected(self):
        with pytest.raises(InvariantViolation):
            BoardSpec(rows=1, cols=1, pitch=0.05)
        with pytest.raises(InvariantViolation):
            BoardSpec(rows=3, cols=3, pitch=0.0)

    def test_7x10(self):
        pts = board_model_points(BoardSpec(rows=7, cols=10, pitch=0.03))
        assert pts.shape == (70, 3)
        assert np.allclose(pts.max(axis=0), (0.27, 0.18, 0.0))
        # row-major: second point advances along the column axis
        assert np.allclose(pts[1], (0.03, 0.0, 0.0))


class TestCorpusInvariants:
    def test_empty_rejected(self):
        with pytest.raises(InvariantViolation):
            make_corpus([])

    def test_duplicate_pair_rejected(self):
        with pytest.raises(InvariantViolation):
            make_corpus([make_obs("a", "upper"), make_obs("a", "upper", offset=1.0)])

    def test_same_id_both_views_allowed(self):
        c = make_corpus([make_obs("a", "upper"), make_obs("a", "lower")])
        assert len(c) == 2

    def test_too_few_points(self):
        with pytest.raises(InvariantViolation):
            make_obs("a", "upper", n=3)

    def test_duplicate_grid_index(self):
        pts = (((0, 0), (1.0, 1.0)),) * 4
        with pytest.raises(InvariantViolation):
            BoardObservation(image_id="a", view="upper", points=pts)

    def test_off_sensor_pixel_rejected(self):
        pts = tuple(((0, i), (5000.0, 10.0 + i)) for i in range(4))
        obs = BoardObservation(image_id="a", view="upper", points=pts)
        with pytest.raises(InvariantViolation):
            make_corpus([obs])

    def test_grid_index_out_of_bounds(self):
        pts = tuple(((i, 11), (10.0 + i, 10.0)) for i in range(4))
        obs = BoardObservation(image_id="a", view="upper", points=pts)
        with pytest.raises(InvariantViolation):
            make_corpus([obs])

    def test_bad_view_tag(self):
        with pytest.raises(InvariantViolation):
            make_obs("a", "sideways")


class TestSerialization:
    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        obs = []
        for i in range(200):
            pts = tuple(
                ((int(r), int(c)), (float(u), float(v)))
                for (r, c), u, v in zip(
                    [(j // 10, j % 10) for j in range(20)],
                    rng.uniform(0, 4911, 20),
                    rng.uniform(0, 3683, 20),
                )
            )
            view = "upper" if i % 3 else "lower"
            obs.append(BoardObservation(f"img{i:04d}", view, pts))
        corpus = make_corpus(obs)
        p1 = tmp_path / "c1.json"
        p2 = tmp_path / "c2.json"
        save_corpus(corpus, p1)
        loaded = load_corpus(p1)
        save_corpus(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert len(loaded) == len(corpus)
        # point order survives
        a = {(o.image_id, o.view): o.points for o in corpus.observations}
        b = {(o.image_id, o.view): o.points for o in loaded.observations}
        assert a == b

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_corpus(tmp_path / "nope.json")

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ParseError) as ei:
            load_corpus(p)
        assert "bad.json" in str(ei.value)

    def test_missing_key(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"board": {"rows": 7, "cols": 10, "pitch": 0.03}}')
        with pytest.raises(ParseError) as ei:
            load_corpus(p)
        assert "sensor" in str(ei.value)

    def test_invariant_failure_on_load(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(
            '{"board": {"rows": 7, "cols": 10, "pitch": 0.03},'
            ' "sensor": {"width": 100, "height": 100}, "observations": []}'
        )
        with pytest.raises(InvariantViolation):
            load_corpus(p)


class TestSplitViews:
    def test_basic_shared(self):
        c = make_corpus(
            [make_obs("A", "upper"), make_obs("A", "lower"), make_obs("B", "upper")]
        )
        up, lo, shared = split_views(c)
        assert shared == ["A"]
        assert len(up) == 2 and len(lo) == 1
        assert len(up) + len(lo) == len(c)

    def test_all_upper(self):
        c = make_corpus([make_obs("A", "upper"), make_obs("B", "upper")])
        up, lo, shared = split_views(c)
        assert lo is None and shared == []
        assert len(up) == 2

    def test_shared_sorted(self):
        obs = []
        for name in ("z9", "a1", "m5"):
            obs.append(make_obs(name, "upper"))
            obs.append(make_obs(name, "lower"))
        _, _, shared = split_views(make_corpus(obs))
        assert shared == ["a1", "m5", "z9"]
