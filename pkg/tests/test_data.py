import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tinygiant.data import (
    NORMALIZATION_FAILED,
    TASKS,
    DataConfig,
    GenerationError,
    Scene,
    SceneObject,
    ScoringError,
    count_answer,
    distance_answer,
    generate_dataset,
    left_right_answer,
    mirror_scene,
    normalize_answer,
    random_scene,
    read_dataset,
    score,
    score_records,
    task_schedule,
    write_dataset,
    write_jsonl,
)
from tinygiant.masks import rle_decode

SMALL = DataConfig(rgb_size=48, depth_size=64)


def box(cls="pallet", x=5.0, y=5.0):
    return SceneObject(cls, x, y, 1.0, 1.0, 0.2)


def test_distance_three_four_five():
    assert distance_answer(box(x=1, y=0), box(x=4, y=4)) == "5.00"


def test_count_pallets():
    objs = [box("pallet"), box("shelf"), box("pallet"), box("pallet"), box("buffer")]
    assert count_answer(objs, "pallet") == "3"


def test_left_right_coordinate_sign():
    # 224 px over 20 m: x = 10 px and 200 px
    a, b = box(x=10 / 224 * 20), box(x=200 / 224 * 20)
    assert left_right_answer(a, b, 20.0, 224) == "left"
    assert left_right_answer(b, a, 20.0, 224) == "right"


@given(st.integers(0, 2**31))
def test_left_right_flips_under_mirroring(seed):
    scene = random_scene(np.random.default_rng(seed), DataConfig())
    mirrored = mirror_scene(scene)
    a, b = scene.objects[0], scene.objects[1]
    ma, mb = mirrored.objects[0], mirrored.objects[1]
    if a.x != b.x:
        assert left_right_answer(a, b, 20.0, 224) != left_right_answer(ma, mb, 20.0, 224)


@given(st.integers(0, 2**31), st.sampled_from(["pallet", "buffer", "transporter", "shelf"]))
def test_count_permutation_invariant(seed, cls):
    scene = random_scene(np.random.default_rng(seed), DataConfig())
    perm = np.random.default_rng(seed + 1).permutation(len(scene.objects))
    assert count_answer(scene.objects, cls) == count_answer([scene.objects[i] for i in perm], cls)


def test_normalize_examples():
    assert normalize_answer("the distance is about 5.00 meters", "distance") == "5.00"
    assert normalize_answer("there are 3 pallets visible", "count") == "3"
    assert normalize_answer("it is on the right side", "left_right") == "right"
    assert normalize_answer("The closest one is <R2>.", "mcq") == "2"
    assert normalize_answer("option 1", "mcq") == "1"


def test_normalize_ignores_region_tags():
    assert normalize_answer("The distance between <R0> and <R1> is 7.25 meters.", "distance") == "7.25"
    assert normalize_answer("<R0> is to the left of <R1>.", "left_right") == "left"


def test_normalization_failure_marker():
    assert normalize_answer("no idea", "count") == NORMALIZATION_FAILED
    report = score_records({"a": NORMALIZATION_FAILED}, [{"id": "a", "task": "count", "answer_norm": "3"}])
    assert report.unparsed == 1 and report.overall == 0.0


def test_generation_is_deterministic(tmp_path):
    write_dataset(tmp_path / "a.jsonl", generate_dataset(7, 12, SMALL))
    write_dataset(tmp_path / "b.jsonl", generate_dataset(7, 12, SMALL))
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_generated_samples_are_consistent(tmp_path):
    samples = generate_dataset(3, 40, SMALL)
    assert [s.task for s in samples].count("count") == 10
    for s in samples:
        assert s.rgb.shape == (3, 48, 48) and s.depth.shape == (1, 64, 64)
        tags = [f"<R{j}>" for j in range(len(s.regions))]
        assert all(t in s.question for t in tags)
        assert f"<R{len(s.regions)}>" not in s.question
        assert normalize_answer(s.answer_free, s.task) == s.answer_norm
        assert all(rle_decode(m).any() for m, _ in s.regions)
    write_dataset(tmp_path / "d.jsonl", samples)
    back = read_dataset(tmp_path / "d.jsonl")
    for a, b in zip(samples, back):
        assert a.to_json() == b.to_json()


def test_answer_grammar():
    for s in generate_dataset(11, 40, SMALL):
        if s.task == "distance":
            assert s.answer_norm.count(".") == 1 and len(s.answer_norm.split(".")[1]) == 2
        elif s.task == "count":
            assert s.answer_norm.isdigit()
        elif s.task == "mcq":
            assert s.answer_norm in {"0", "1", "2"}
        else:
            assert s.answer_norm in {"left", "right"}


def test_dataset_schema_fields(tmp_path):
    import json

    write_dataset(tmp_path / "d.jsonl", generate_dataset(0, 2, SMALL))
    row = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
    assert set(row) == {"id", "rgb", "depth", "regions", "question", "task", "answer_free", "answer_norm"}
    assert set(row["regions"][0]) == {"size", "counts", "class"}


def test_task_schedule_errors():
    with pytest.raises(GenerationError):
        task_schedule(4, {"distance": 0.5, "count": 0.4}, np.random.default_rng(0))
    with pytest.raises(GenerationError):
        task_schedule(4, {"distance": 0.5, "colour": 0.5}, np.random.default_rng(0))


def test_overcrowded_scene_fails_after_retries():
    cfg = DataConfig(world_extent=8.0, min_objects=6, max_objects=6, max_retries=50)
    with pytest.raises(GenerationError):
        random_scene(np.random.default_rng(0), cfg)


# scoring --------------------------------------------------------------------------


def truth_rows(tasks_answers):
    return [{"id": str(i), "task": t, "answer_norm": a} for i, (t, a) in enumerate(tasks_answers)]


def test_perfect_predictions(tmp_path):
    truth = truth_rows([("distance", "5.00"), ("count", "3"), ("mcq", "1"), ("left_right", "left")])
    write_jsonl(tmp_path / "t.jsonl", truth)
    write_jsonl(tmp_path / "p.jsonl", [{"id": r["id"], "answer": r["answer_norm"]} for r in truth])
    assert score(tmp_path / "p.jsonl", tmp_path / "t.jsonl").overall == 100.0


def test_distance_threshold():
    truth = truth_rows([("distance", "5.00")])
    assert score_records({"0": "5.40"}, truth).overall == 100.0
    assert score_records({"0": "5.60"}, truth).overall == 0.0


def test_half_wrong_counts():
    truth = truth_rows([("count", "3")] * 10)
    preds = {str(i): ("3" if i < 5 else "4") for i in range(10)}
    report = score_records(preds, truth)
    assert report.per_task["count"] == 50.0 and report.counts["count"] == 10


def test_overall_is_count_weighted():
    truth = truth_rows([("count", "1")] * 3 + [("mcq", "0")])
    report = score_records({"0": "1", "1": "1", "2": "1", "3": "2"}, truth)
    assert report.overall == 75.0
    assert set(report.per_task) == set(TASKS)


def test_scoring_id_mismatch():
    with pytest.raises(ScoringError, match="'1'"):
        score_records({"0": "3"}, truth_rows([("count", "3"), ("count", "2")]))


def test_scene_type_is_plain_data():
    s = Scene(20.0, [box()])
    assert mirror_scene(s).objects[0].x == 15.0
