import hashlib

import numpy as np
import pytest

from apolab import datagen
from apolab.errors import InputDomainError
from apolab.losses import PreferenceExample

SCENARIOS = datagen.SCENARIOS


@pytest.fixture(scope="module", params=SCENARIOS)
def small(request):
    task = datagen.make_task(request.param, 3, n_problems=30)
    data = datagen.gen_dataset(task, 4, 200)
    probe, dropped = datagen.build_probe(task, data, 5, size=100)
    return task, data, probe, dropped


def test_task_shape_invariants():
    for scenario in SCENARIOS:
        for seed in range(5):
            task = datagen.make_task(scenario, seed, n_problems=20)
            for prob in task.problems:
                assert 4 <= prob.length <= 8
                corrects = task.correct_responses(prob.prompt)
                qs = [task.quality(c) for c in corrects]
                assert len(corrects) >= 3 and len(set(qs)) == len(qs)
                assert task.is_correct(prob.prompt, prob.preferred)
                if scenario == "verifiable_optimum":
                    assert prob.preferred == task.canonical(prob.prompt)
                else:
                    assert task.quality(prob.preferred) > min(qs)


def test_correctness_requires_end_token():
    task = datagen.make_task("verifiable_optimum", 0, n_problems=3)
    good = task.canonical(0)
    assert task.is_correct(0, good)
    assert not task.is_correct(0, good[:-1])
    assert not task.is_correct(0, good + (task.vocab.end_token,))


def test_every_example_meets_its_predicate(small):
    task, data, _, _ = small
    assert len(data) == 200
    assert len(set((e.prompt, e.preferred, e.dispreferred) for e in data)) == 200
    for ex in data:
        datagen.check_example(task, ex)
        if task.scenario == "verifiable_optimum":
            assert task.is_correct(ex.prompt, ex.preferred)
            assert not task.is_correct(ex.prompt, ex.dispreferred)
        else:
            q_pos = task.quality(ex.preferred)
            assert q_pos < task.quality(ex.dispreferred)
            assert any(task.quality(c) < q_pos for c in task.correct_responses(ex.prompt))


def test_size_one_verifiable_pair():
    task = datagen.make_task("verifiable_optimum", 8, n_problems=5)
    (ex,) = datagen.gen_dataset(task, 1, 1)
    assert ex.preferred in task.correct_responses(ex.prompt)
    assert ex.dispreferred not in task.correct_responses(ex.prompt)


def test_predicate_checker_rejects_swapped_pair():
    task = datagen.make_task("graded_quality", 2, n_problems=5)
    ex = datagen.gen_dataset(task, 1, 1)[0]
    with pytest.raises(InputDomainError):
        datagen.check_example(task, PreferenceExample(ex.prompt, ex.dispreferred, ex.preferred))


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.parametrize("scenario", SCENARIOS)
def test_same_seed_gives_identical_dataset(tmp_path, scenario):
    task = datagen.make_task(scenario, 42, n_problems=40)
    a = datagen.save_dataset(tmp_path / "a.jsonl", task, datagen.gen_dataset(task, 42, 100), 42)
    b = datagen.save_dataset(tmp_path / "b.jsonl", task, datagen.gen_dataset(task, 42, 100), 42)
    c = datagen.save_dataset(tmp_path / "c.jsonl", task, datagen.gen_dataset(task, 43, 100), 43)
    assert _digest(a) == _digest(b)
    assert _digest(a) != _digest(c)
    assert datagen.make_task(scenario, 42, n_problems=40).fingerprint() == task.fingerprint()


def test_insufficient_pairs_rejected():
    task = datagen.make_task("graded_quality", 1, n_problems=2)
    with pytest.raises(InputDomainError, match="distinct pairs"):
        datagen.gen_dataset(task, 0, 10_000)


def test_bad_task_shapes_rejected():
    with pytest.raises(InputDomainError):
        datagen.make_task("open_ended", 0)
    with pytest.raises(InputDomainError):
        datagen.make_task("graded_quality", 0, min_len=2, n_free=3)
    with pytest.raises(InputDomainError):
        datagen.make_task("graded_quality", 0, vocab_size=3)


def test_probe_roles_pairwise_distinct(small):
    task, _, probe, _ = small
    expected = 6 if task.scenario == "graded_quality" else 4
    for entry in probe.entries:
        seqs = list(entry.roles.values())
        assert len(seqs) == expected and len(set(seqs)) == expected


def test_similar_variants_differ_in_one_position(small):
    task, _, probe, _ = small
    for entry in probe.entries:
        for base, sim in (("y_plus", "y_plus_sim"), ("y_minus", "y_minus_sim")):
            a, b = entry.roles[base], entry.roles[sim]
            assert len(a) == len(b)
            assert sum(x != y for x, y in zip(a, b)) == 1


def test_similar_variants_keep_correctness_when_possible(small):
    task, _, probe, _ = small
    kept = sum(task.is_correct(e.prompt, e.roles["y_plus_sim"]) == task.is_correct(e.prompt, e.roles["y_plus"])
               for e in probe.entries)
    assert kept == len(probe.entries)


def test_graded_probe_quality_ordering():
    task = datagen.make_task("graded_quality", 9, n_problems=30)
    data = datagen.gen_dataset(task, 1, 150)
    probe, _ = datagen.build_probe(task, data, 2, size=150)
    for e in probe.entries:
        h, p, low = (task.quality(e.roles[r]) for r in ("y_plus_h", "y_plus", "y_plus_l"))
        assert h < p < low
        for role in ("y_plus_h", "y_plus_l"):
            assert task.is_correct(e.prompt, e.roles[role])


def test_probe_drops_entries_without_better_response():
    task = datagen.make_task("graded_quality", 9, n_problems=5)
    prob = task.problems[0]
    best = task.canonical(0)
    worse = sorted(task.correct_responses(0), key=task.quality)[-1]
    probe_data = [PreferenceExample(0, best, worse), *datagen.gen_dataset(task, 0, 5)]
    probe, dropped = datagen.build_probe(task, probe_data, 0, size=10)
    assert dropped >= 1
    assert all(e.roles["y_plus"] != best or e.prompt != prob.prompt for e in probe.entries)


@pytest.mark.parametrize("scenario", SCENARIOS)
def test_default_sizing(scenario):
    task = datagen.make_task(scenario, 42)
    assert len(task.problems) == 200 and task.vocab.size == 16
    data = datagen.gen_dataset(task, 42, 2500)
    probe, dropped = datagen.build_probe(task, data, 42)
    assert len(data) == 2500
    assert len(probe.entries) + dropped == 500
    assert len(probe.entries) >= 450


def test_round_trips(tmp_path, small):
    task, data, probe, _ = small
    back = datagen.SyntheticTask.from_record(task.to_record())
    assert back.fingerprint() == task.fingerprint()
    assert np.array_equal(back.costs, task.costs)
    header, loaded = datagen.load_dataset(datagen.save_dataset(tmp_path / "d.jsonl", task, data, 4))
    assert loaded == data and header["task_fingerprint"] == task.fingerprint()
    header, ploaded = datagen.load_probe(datagen.save_probe(tmp_path / "p.jsonl", task, probe, 5))
    assert ploaded.to_records() == probe.to_records()
    assert header["roles"] == probe.roles


def test_corpus_is_built_around_habit():
    task = datagen.make_task("graded_quality", 0, n_problems=4)
    corpus = datagen.gen_base_corpus(task, 0, per_problem=50, habit_rate=1.0)
    assert all(r == task.problems[p].habit for p, r in corpus)
    noisy = datagen.gen_base_corpus(task, 0, per_problem=50, habit_rate=0.0, noise=0.5)
    assert any(r != task.problems[p].habit for p, r in noisy)
    assert all(r[-1] == task.vocab.end_token and len(r) == task.problems[p].length + 1
               for p, r in noisy)


def test_greedy_metrics_on_an_oracle_policy():
    from apolab import seqmodel
    task = datagen.make_task("graded_quality", 1, n_problems=6)
    policy = seqmodel.Policy.zeros(task.vocab, len(task.problems), context_window=4)
    for prob in task.problems:
        best = task.canonical(prob.prompt)
        for t in range(len(best)):
            policy.set_distribution(prob.prompt, best[:t], np.eye(task.vocab.size)[best[t]])
    m = datagen.greedy_metrics(task, policy)
    assert m["pass_rate"] == 1.0
    assert m["mean_quality"] == pytest.approx(np.mean([task.quality(task.canonical(p.prompt))
                                                       for p in task.problems]))
    assert all(o.c_p == 1 for o in m["outcomes"])
