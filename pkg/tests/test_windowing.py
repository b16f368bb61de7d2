import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peloc import windowing
from peloc.core import PhaseKind
from peloc.errors import MissingLabel, OutOfWindow, WindowLargerThanSession
from peloc.windowing import BoundaryKind, build_prompt, denormalize_offset, normalize_offset, sample_window


class TestNormalizeOffset:
    def test_table_value(self):
        assert normalize_offset(4.17, 0.0, 30.0) == pytest.approx(0.139, abs=1e-12)

    def test_left_edge(self):
        assert normalize_offset(100.0, 100.0, 30.0) == 0.0

    def test_right_edge(self):
        assert normalize_offset(130.0, 100.0, 30.0) == 1.0

    def test_outside_raises(self):
        with pytest.raises(OutOfWindow):
            normalize_offset(131.0, 100.0, 30.0)
        with pytest.raises(OutOfWindow):
            normalize_offset(99.0, 100.0, 30.0)


class TestDenormalizeOffset:
    def test_midpoint(self):
        assert denormalize_offset(0.5, 100.0, 30.0) == 115.0

    def test_zero_offset(self):
        assert denormalize_offset(0.0, 47.0, 60.0) == 47.0

    def test_table_round_trip(self):
        o = normalize_offset(2123.92, 2100.0, 60.0)
        assert abs(denormalize_offset(o, 2100.0, 60.0) - 2123.92) < 1e-9

    @settings(max_examples=200)
    @given(
        t_start=st.floats(0, 5000, allow_nan=False),
        frac=st.floats(0, 1, allow_nan=False),
        D=st.sampled_from([30.0, 60.0, 120.0]),
    )
    def test_round_trip_property(self, t_start, frac, D):
        t_abs = t_start + frac * D
        o = normalize_offset(t_abs, t_start, D)
        assert abs(denormalize_offset(o, t_start, D) - t_abs) < 1e-9


class TestSampleWindow:
    def test_interior_placement(self):
        spec, target = sample_window(105.83, 30.0, 3100.0, 0.25)
        assert spec.t_start == pytest.approx(98.33, abs=1e-12)
        assert target == 0.25

    def test_left_clamp(self):
        spec, target = sample_window(4.17, 30.0, 3100.0, 0.9)
        assert spec.t_start == 0.0
        assert target == pytest.approx(4.17 / 30.0, abs=1e-12)

    def test_u_zero(self):
        spec, target = sample_window(50.0, 30.0, 3100.0, 0.0)
        assert spec.t_start == 50.0 and target == 0.0

    def test_right_clamp(self):
        spec, target = sample_window(3095.0, 30.0, 3100.0, 0.1)
        assert spec.t_start == 3070.0
        assert target == pytest.approx(25.0 / 30.0)

    def test_window_larger_than_session(self):
        with pytest.raises(WindowLargerThanSession):
            sample_window(10.0, 30.0, 20.0, 0.5)

    @settings(max_examples=300)
    @given(
        t_abs=st.floats(0, 3000, allow_nan=False),
        u=st.floats(0, 1, allow_nan=False),
        D=st.sampled_from([30.0, 60.0, 120.0]),
    )
    def test_contains_boundary(self, t_abs, u, D):
        spec, target = sample_window(t_abs, D, 3000.0, u)
        assert 0.0 <= target <= 1.0
        assert spec.t_start - 1e-9 <= t_abs <= spec.t_start + D + 1e-9
        interior = t_abs >= D and 3000.0 - t_abs >= D
        if interior:
            assert target == u


class TestBuildPrompt:
    def test_p2_start_matches_template(self):
        expected = (
            "The following audio and transcript segment is focused around the START of "
            "'Imaginal lasted about 30-45 minutes (or about 15 for final imaginal)'. "
            "Identify the normalized offset (between 0.0 and 1.0) of this precise START "
            "within the given segment."
        )
        assert build_prompt(PhaseKind.P2, BoundaryKind.START) == expected

    def test_end_substitutes_twice(self):
        start = build_prompt(PhaseKind.P2, BoundaryKind.START)
        end = build_prompt(PhaseKind.P2, BoundaryKind.END)
        assert end == start.replace("START", "END")
        assert end.count("END") == 2

    def test_phases_differ_only_in_question(self):
        p1 = build_prompt(PhaseKind.P1, BoundaryKind.START)
        p3 = build_prompt(PhaseKind.P3, BoundaryKind.START)
        q1 = windowing.DEFAULT_PHASE_QUESTIONS[PhaseKind.P1]
        q3 = windowing.DEFAULT_PHASE_QUESTIONS[PhaseKind.P3]
        assert p1.replace(q1, "{}") == p3.replace(q3, "{}")

    @pytest.mark.parametrize("phase", list(PhaseKind))
    @pytest.mark.parametrize("boundary", list(BoundaryKind))
    def test_boundary_twice_question_once(self, phase, boundary):
        prompt = build_prompt(phase, boundary)
        assert prompt.count(boundary.value.upper()) == 2
        assert prompt.count(windowing.DEFAULT_PHASE_QUESTIONS[phase]) == 1


class TestTokenize:
    def test_byte_round_trip(self):
        text = "hello, therapist 4.17s"
        ids = windowing.tokenize(text)
        assert ids.max() < 256 and ids.min() >= 0
        assert windowing.detokenize(ids) == text

    def test_specials_outside_byte_range(self):
        assert windowing.PAD == 256 and windowing.VOCAB_SIZE == 264


class TestMakeExamples:
    def test_six_per_count(self, mini_corpus):
        s = mini_corpus["sessions"][0]
        examples = windowing.make_examples(s, 30.0, rng_seed=5, per_boundary_count=1)
        assert len(examples) == 6
        keys = {(e.spec.phase, e.spec.boundary) for e in examples}
        assert len(keys) == 6

    def test_deterministic_targets(self, mini_corpus):
        s = mini_corpus["sessions"][0]
        a = windowing.make_examples(s, 30.0, rng_seed=9, per_boundary_count=2)
        b = windowing.make_examples(s, 30.0, rng_seed=9, per_boundary_count=2)
        assert [e.target_offset for e in a] == [e.target_offset for e in b]
        assert all(x.spec == y.spec for x, y in zip(a, b))

    def test_example_contents(self, mini_corpus):
        s = mini_corpus["sessions"][0]
        ex = windowing.make_examples(s, 30.0, rng_seed=5, per_boundary_count=1)[0]
        assert ex.audio.shape == (2998, 64)
        assert len(ex.prompt_tokens) > 0
        assert 0.0 <= ex.target_offset <= 1.0

    def test_missing_label(self, mini_corpus):
        import dataclasses
        s = mini_corpus["sessions"][0]
        broken = dataclasses.replace(s, annotations=s.annotations[:2])
        with pytest.raises(MissingLabel):
            windowing.make_examples(broken, 30.0, rng_seed=1, per_boundary_count=1)

    def test_uniform_target_statistics(self, mini_corpus):
        # interior boundary: P2 start is > 30 s from both session edges here
        s = mini_corpus["sessions"][0]
        rng = np.random.default_rng(11)
        t_abs = s.annotation_for(PhaseKind.P2).start_s
        targets = [sample_window(t_abs, 30.0, s.duration_s, float(rng.random()))[1]
                   for _ in range(1000)]
        assert all(0.0 <= t <= 1.0 for t in targets)
        assert abs(np.mean(targets) - 0.5) < 0.05


class TestPlanMaterialize:
    def test_plans_match_examples(self, mini_corpus):
        from peloc import ingest
        s = mini_corpus["sessions"][1]
        plans = windowing.plan_examples(s, 30.0, 3, 2)
        audio = ingest.load_wav(s.audio_path)
        materialized = [windowing.materialize(p, audio) for p in plans]
        direct = windowing.make_examples(s, 30.0, 3, 2)
        for m, d in zip(materialized, direct):
            assert m.spec == d.spec and m.target_offset == d.target_offset
            assert np.array_equal(m.audio, d.audio)
