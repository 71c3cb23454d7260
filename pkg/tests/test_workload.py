import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lipserve.experiment import run_cell
from lipserve.kernel import Kernel, KernelConfig, KvfsConfig
from lipserve.kvfs import KvEntry
from lipserve.rag import CachePolicy, baseline_lip, doc_file, rag_lip
from lipserve.workload import Request, WorkloadSpec, doc_tokens, gen_requests, popularity, top_mass

SMALL = WorkloadSpec(num_docs=100, doc_len=64, query_len=4, gen_len=2, request_rate=100.0, duration=30.0)


# -- popularity ------------------------------------------------------------------------------


@given(st.integers(1, 500), st.floats(0.05, 20))
def test_popularity_is_a_decreasing_distribution(n, alpha):
    p = popularity(n, alpha)
    assert p.sum() == pytest.approx(1.0)
    assert np.all(np.diff(p) <= 0)


def test_rank_weights_by_hand():
    # alpha = 1: weights 1, 1/2, 1/3 over H_3 = 11/6
    np.testing.assert_allclose(popularity(3, 1.0), [6 / 11, 3 / 11, 2 / 11])
    # alpha = 0.5: weights r**-2 -> 1, 1/4, 1/9 over 49/36
    np.testing.assert_allclose(popularity(3, 0.5), [36 / 49, 9 / 49, 4 / 49])


def test_small_index_concentrates_on_rank_one():
    assert popularity(100, 0.02)[0] > 0.99


def test_large_index_flattens():
    p = popularity(100, 50.0)
    assert p[0] < 0.02 and p[0] / p[-1] < 1.1


def test_top_mass_is_monotone_in_alpha():
    masses = [top_mass(100, a, 20) for a in (0.2, 0.6, 1.0, 1.4, 2.0)]
    assert masses == sorted(masses, reverse=True)


# -- arrivals -------------------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_poisson_count_within_three_sigma(seed):
    spec = WorkloadSpec(request_rate=20.0, duration=100.0, seed=seed)
    n = len(gen_requests(spec))
    mean = 20.0 * 100.0
    assert abs(n - mean) < 3 * np.sqrt(mean)


def test_interarrivals_look_exponential():
    reqs = gen_requests(WorkloadSpec(request_rate=50.0, duration=200.0))
    gaps = np.diff([r.arrival for r in reqs])
    assert gaps.mean() == pytest.approx(1 / 50, rel=0.05)
    assert gaps.std() == pytest.approx(1 / 50, rel=0.05)


def test_streams_are_seeded():
    a, b = gen_requests(WorkloadSpec(seed=4)), gen_requests(WorkloadSpec(seed=4))
    assert a == b
    assert a != gen_requests(WorkloadSpec(seed=5))


def test_alpha_changes_docs_not_arrivals():
    a = gen_requests(WorkloadSpec(pareto_alpha=0.2))
    b = gen_requests(WorkloadSpec(pareto_alpha=2.0))
    assert [r.arrival for r in a] == [r.arrival for r in b]
    assert [r.query for r in a] == [r.query for r in b]


def test_request_shape():
    reqs = gen_requests(WorkloadSpec(query_len=7, num_docs=3))
    assert all(len(r.query) == 7 and 0 <= r.doc < 3 and 0 not in r.query for r in reqs)
    assert all(0 < r.arrival < 5.0 for r in reqs)


def test_doc_tokens_are_stable_and_eos_free():
    d = doc_tokens(3, 3000)
    assert d == doc_tokens(3, 3000) and d != doc_tokens(4, 3000)
    assert len(d) == 3000 and min(d) >= 1


@pytest.mark.parametrize("kw", [{"pareto_alpha": 0}, {"num_docs": 0}, {"request_rate": -1}, {"gen_len": 0}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        WorkloadSpec(**kw)


# -- RAG LIPs ------------------------------------------------------------------------------------


def run_requests(lip, reqs, config=None):
    kernel = Kernel(config)
    for r in reqs:
        kernel.spawn(lip, r, at=r.arrival)
    kernel.run()
    return kernel


def prefill_sizes(kernel):
    first = {}
    for rec in kernel.trace.of_type("pred_enqueue"):
        first.setdefault(rec["pid"], rec["detail"]["n_new"])
    return [first[pid] for pid in sorted(first)]


def test_second_request_for_retained_doc_prefills_only_the_query():
    spec = WorkloadSpec()
    q = tuple(range(1, 33))
    kernel = run_requests(rag_lip(CachePolicy("top_k", k=20), spec), [Request(0, 0.0, 5, q), Request(1, 1.0, 5, q)])
    assert prefill_sizes(kernel) == [3032, 32]
    assert [r["detail"]["hit"] for r in kernel.trace.of_type("cache")] == [False, True]
    assert kernel.fs.names() == [doc_file(5)]


def test_baseline_prefills_doc_and_query_every_time():
    spec = WorkloadSpec()
    q = tuple(range(1, 33))
    kernel = run_requests(baseline_lip(spec), [Request(i, float(i), 5, q) for i in range(3)])
    assert prefill_sizes(kernel) == [3032] * 3
    assert kernel.fs.names() == [] and kernel.fs.pool.allocated["device"] == 0


def test_cached_and_uncached_generations_agree():
    spec = dataclasses.replace(SMALL, gen_len=16)
    reqs = [Request(i, float(i), 2, (9, 8, 7, 6)) for i in range(3)]
    cached = run_requests(rag_lip(CachePolicy(), spec), reqs)
    plain = run_requests(baseline_lip(spec), reqs)

    def tokens(k):
        return [(r["pid"], r["detail"]["token"]) for r in k.trace.of_type("token")]

    assert tokens(cached) == tokens(plain)


def test_top_k_keeps_at_most_k_files():
    kernel = Kernel()
    lip = rag_lip(CachePolicy("top_k", k=3), SMALL)
    for r in gen_requests(dataclasses.replace(SMALL, duration=2.0)):
        kernel.spawn(lip, r, at=r.arrival)
    kernel.run()
    assert len(kernel.fs.names()) == len(lip.retained) <= 3
    assert {doc_file(d) for d in lip.retained} == set(kernel.fs.names())
    # the retained docs are the most requested ones
    top = sorted(lip.counts.values(), reverse=True)[:3]
    assert sorted((lip.counts[d] for d in lip.retained), reverse=True) == top


def test_consecutive_policy_needs_a_run():
    spec = SMALL
    q = (1, 2, 3, 4)
    reqs = [Request(0, 0.0, 1, q), Request(1, 1.0, 2, q), Request(2, 2.0, 2, q), Request(3, 3.0, 2, q)]
    kernel = run_requests(rag_lip(CachePolicy("consecutive", threshold=2), spec), reqs)
    assert [r["detail"]["hit"] for r in kernel.trace.of_type("cache")] == [False, False, False, True]
    assert kernel.fs.names() == [doc_file(2)]


def test_pool_exhaustion_evicts_then_fails():
    # 9 pages: a retained doc takes 4, a working file 5
    spec = dataclasses.replace(SMALL, gen_len=1)
    config = KernelConfig(kvfs=KvfsConfig(device_capacity=9))
    q = (1, 2, 3, 4)
    lip = rag_lip(CachePolicy("top_k", k=5), spec)
    kernel = Kernel(config)
    kernel.spawn(lip, Request(0, 0.0, 1, q))
    kernel.run()
    assert kernel.fs.names() == [doc_file(1)]
    hog = kernel.fs.create("hog")
    kernel.fs.append(hog, [KvEntry(0, 0, 0)])
    kernel.spawn(lip, Request(1, 1.0, 2, q))
    kernel.run()
    assert [r["detail"]["doc"] for r in kernel.trace.of_type("evict")] == [1]
    assert all(p.exit_status == 0 for p in kernel.processes.values())
    assert kernel.fs.names() == ["hog"]
    # a request larger than the whole pool fails after its single retry
    big = dataclasses.replace(spec, doc_len=200)
    kernel = run_requests(rag_lip(CachePolicy(), big), [Request(0, 0.0, 1, q)], config)
    assert [p.exit_status for p in kernel.processes.values()] == [1]
    assert kernel.fs.pool.allocated["device"] == 0


@pytest.mark.parametrize("alpha", [0.2, 0.6, 1.0])
def test_hit_rate_tracks_top20_mass(alpha):
    r = run_cell(KernelConfig(), dataclasses.replace(SMALL, pareto_alpha=alpha), "topk:20")
    assert abs(r.metrics.hit_rate - top_mass(100, alpha, 20)) < 0.05


def test_policy_none_never_hits():
    r = run_cell(KernelConfig(), dataclasses.replace(SMALL, duration=3.0), "none")
    assert r.metrics.hit_rate == 0.0


def test_baseline_throughput_ignores_alpha():
    spec = WorkloadSpec(request_rate=20.0, duration=3.0)
    lo = run_cell(KernelConfig(), dataclasses.replace(spec, pareto_alpha=0.2), "none").metrics
    hi = run_cell(KernelConfig(), dataclasses.replace(spec, pareto_alpha=2.0), "none").metrics
    assert hi.throughput == pytest.approx(lo.throughput, rel=0.05)


def test_token_conservation():
    r = run_cell(KernelConfig(), dataclasses.replace(SMALL, duration=3.0, gen_len=5), "topk:20")
    assert r.metrics.tokens == 5 * r.metrics.requests_completed and r.metrics.requests_failed == 0


@pytest.mark.parametrize("text,want", [("none", "none"), ("topk:7", "topk:7"), ("top_k", "topk:20"), ("consecutive:3", "consecutive:3")])
def test_policy_parsing(text, want):
    assert str(CachePolicy.parse(text)) == want


@pytest.mark.parametrize("text", ["lru", "topk:x", "topk:0"])
def test_policy_parse_errors(text):
    with pytest.raises(ValueError):
        CachePolicy.parse(text)
