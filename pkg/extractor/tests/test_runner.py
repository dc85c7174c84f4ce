"""Contract tests: emitted files must satisfy the engine's trace format and
flow through its correction pipeline end to end."""

import json

import numpy as np
import pytest

import ladcalib

from ladextract.job import ExtractionJob, InstanceSpec, JobError, job_from_dict
from ladextract.runner import ExtractionError, extract_traces, load_template, render_prompt
from ladextract.toy import ToySession


def _job(n=2, count=1, plan="single", gt=1, scheme="numeric", t=3, seed=0):
    instances = tuple(
        InstanceSpec(
            instance_id=f"inst{i}",
            query=f"a toy caption {i}",
            image_paths=tuple(f"img-{i}-{k}.png" for k in range(1, n + 1)),
            gt=gt,
        )
        for i in range(count)
    )
    return ExtractionJob(model="toy", instances=instances, scheme=scheme, plan=plan, t=t, seed=seed)


def test_two_image_instance_emits_engine_valid_trace(tmp_path):
    session = ToySession()
    out = tmp_path / "traces.jsonl"
    written = extract_traces(_job(), session, out)
    assert written == 1
    traces = ladcalib.load_traces(out)
    assert len(traces) == 1
    t = traces[0]
    assert t.n == 2
    assert t.scheme == "numeric"
    probs = ladcalib.score_candidates(t).probs
    assert abs(probs.sum() - 1.0) < 1e-9

    # and the same record flows through the full correction pipeline
    cal_path = tmp_path / "cal.jsonl"
    extract_traces(_job(n=2, count=4, plan="cyclic", gt=1, seed=5), session, cal_path)
    profile = ladcalib.build_profile(ladcalib.load_traces(cal_path))
    result = ladcalib.predict(t, profile)
    assert result.predicted_index in (1, 2)
    assert abs(result.calibrated_probs.sum() - 1.0) < 1e-9


def test_cyclic_plan_counts_and_coverage(tmp_path):
    out = tmp_path / "cal.jsonl"
    written = extract_traces(_job(n=4, count=5, plan="cyclic", gt=2), ToySession(), out)
    assert written == 20
    traces = ladcalib.load_traces(out)
    counts = [0] * 4
    for t in traces:
        counts[t.gt_position - 1] += 1
    assert counts == [5, 5, 5, 5]


def test_gt_omitted_for_unlabeled_instances(tmp_path):
    job = _job()
    job.instances[0].gt = None
    out = tmp_path / "traces.jsonl"
    extract_traces(job, ToySession(), out)
    rec = json.loads(out.read_text().splitlines()[0])
    assert "gt" not in rec
    assert ladcalib.load_traces(out)[0].gt_position is None


def test_multi_token_identifiers_survive_the_engine_scoring(tmp_path):
    out = tmp_path / "traces.jsonl"
    extract_traces(_job(n=12, plan="single"), ToySession(), out)
    t = ladcalib.load_traces(out)[0]
    lengths = {len(c.ids) for c in t.cand_tokens}
    assert lengths == {1, 2}
    assert abs(ladcalib.score_candidates(t).probs.sum() - 1.0) < 1e-9


def test_shuffle_plan_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    extract_traces(_job(n=3, count=2, plan="shuffles", t=4, seed=11), ToySession(), a)
    extract_traces(_job(n=3, count=2, plan="shuffles", t=4, seed=11), ToySession(), b)
    assert a.read_bytes() == b.read_bytes()
    assert len(ladcalib.load_traces(a)) == 8


def test_colliding_tokenizer_fails_loudly(tmp_path):
    class CollidingSession(ToySession):
        def encode_label(self, label):
            return [1234]

    with pytest.raises(ExtractionError, match="collide"):
        extract_traces(_job(), CollidingSession(), tmp_path / "x.jsonl")


def test_cyclic_plan_requires_gt():
    with pytest.raises(JobError, match="cyclic"):
        _job(plan="cyclic", gt=None).validate()


def test_template_renders_count_and_caption():
    text = render_prompt(load_template("vanilla"), 4, "a red bicycle")
    assert "4 images indexed from 1 to 4" in text
    assert text.rstrip().endswith("Answer:")
    assert "a red bicycle" in text
    with pytest.raises(ExtractionError, match="template"):
        load_template("missing")


def test_job_round_trip_from_dict():
    doc = {
        "model": "toy",
        "scheme": "upper-alpha",
        "plan": "shuffles",
        "t": 2,
        "seed": 3,
        "instances": [
            {"id": "a", "query": "q", "images": ["1.png", "2.png"], "gt": 1},
            {"id": "b", "query": "r", "images": ["3.png", "4.png"]},
        ],
    }
    job = job_from_dict(doc)
    assert job.n == 2
    assert job.instances[1].gt is None


def test_extracted_calibration_flows_through_the_corrector(tmp_path):
    session = ToySession(seed=42)
    cal_path = tmp_path / "cal.jsonl"
    extract_traces(_job(n=4, count=6, plan="cyclic", gt=1, seed=1), session, cal_path)
    cal = ladcalib.load_traces(cal_path)
    profile = ladcalib.build_profile(cal)

    probe_path = tmp_path / "probe.jsonl"
    probe_job = _job(n=4, count=3, plan="single", gt=3, seed=9)
    for i, inst in enumerate(probe_job.instances):
        inst.query = f"fresh caption {i}"
    extract_traces(probe_job, session, probe_path)
    for trace in ladcalib.load_traces(probe_path):
        result = ladcalib.predict(trace, profile)
        assert 1 <= result.predicted_index <= 4
        assert abs(result.calibrated_probs.sum() - 1.0) < 1e-9
        assert len(result.posterior.selected_layers) == 2
