import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import toy_finetune_config
from t2ireid.data import Vocabulary, split_words
from t2ireid.errors import ContractError, EvaluationError
from t2ireid.evaluation import (
    RankKReport,
    RetrievalRun,
    cross_domain_evaluate,
    evaluate,
    first_match_ranks,
    rank_k,
    report_from_run,
    retrieve,
)
from t2ireid.finetune import finetune_loop


def run_with_first_hits(ranks, gallery_size=10):
    """Query q's only correct item sits at 1-based position ``ranks[q]`` of its ranking."""
    n = gallery_size * len(ranks)
    gallery_labels = np.full(n, -1)
    rows = []
    for q, r in enumerate(ranks):
        base = q * gallery_size
        gallery_labels[base + r - 1] = q
        own = list(range(base, base + gallery_size))
        rows.append(own + [i for i in range(n) if i not in own])
    return RetrievalRun(np.arange(len(ranks)), gallery_labels, np.array(rows))


# ---------------------------------------------------------------- retrieve


def test_self_similarity_ranks_first(rng):
    gallery = rng.standard_normal((6, 4))
    assert retrieve(gallery[3], gallery)[0] == 3


def test_single_item_gallery():
    assert retrieve([1.0, 2.0], [[3.0, -1.0]]).tolist() == [0]


def test_ties_go_to_lower_index():
    gallery = [[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [1.0, 0.0]]
    assert retrieve([1.0, 0.0], gallery).tolist() == [0, 2, 3, 1]


def test_retrieve_matches_brute_force_sort(rng):
    for _ in range(30):
        gallery = rng.standard_normal((10, 5))
        q = rng.standard_normal(5)
        assert retrieve(q, gallery).tolist() == oracles.ranked_gallery(q.tolist(), gallery.tolist())


def test_retrieve_dimension_mismatch():
    with pytest.raises(ContractError):
        retrieve([1.0, 0.0], [[1.0, 0.0, 0.0]])


# ---------------------------------------------------------------- rank_k


def test_rank_k_counting_example():
    run = run_with_first_hits([1, 2, 4])
    assert first_match_ranks(run).tolist() == [1, 2, 4]
    assert rank_k(run, 1) == pytest.approx(1 / 3)
    assert rank_k(run, 5) == 1.0


def test_rank_k_all_first():
    run = run_with_first_hits([1, 1, 1, 1])
    assert rank_k(run, 1) == 1.0


def test_rank_k_window_covers_gallery():
    run = run_with_first_hits([3, 7, 10])
    assert rank_k(run, 10) == 1.0


def test_missing_identity_names_query():
    run = RetrievalRun(np.array([5]), np.array([1, 2]), np.array([[0, 1]]), ["query_x"])
    with pytest.raises(EvaluationError, match="query_x"):
        rank_k(run, 1)
    with pytest.raises(ContractError):
        rank_k(run_with_first_hits([1]), 0)


def random_run(rng, n_gallery, n_query, n_ids, decimals=None):
    gl = rng.integers(0, n_ids, n_gallery)
    ql = rng.choice(np.unique(gl), n_query)
    q, g = rng.standard_normal((n_query, 4)), rng.standard_normal((n_gallery, 4))
    return q, g, ql, gl


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 50), st.integers(1, 8))
def test_rank_k_monotone_and_matches_oracle(seed, n_gallery, n_query):
    rng = np.random.default_rng(seed)
    q, g, ql, gl = random_run(rng, n_gallery, n_query, max(1, n_gallery // 3))
    run = RetrievalRun.from_embeddings(q, g, ql, gl)
    sims = [[oracles.cos(a.tolist(), b.tolist()) for b in g] for a in q]
    values = [rank_k(run, k) for k in (1, 5, 10)]
    assert values == sorted(values)
    for k, v in zip((1, 5, 10), values):
        assert v == oracles.rank_k_from_sims(sims, ql.tolist(), gl.tolist(), k)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rank_k_gallery_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    q, g, ql, gl = random_run(rng, 20, 5, 6)
    perm = rng.permutation(20)
    a = RetrievalRun.from_embeddings(q, g, ql, gl)
    b = RetrievalRun.from_embeddings(q, g[perm], ql, gl[perm])
    for k in (1, 5, 10):
        assert rank_k(a, k) == rank_k(b, k)


def test_report_formats():
    rep = report_from_run(run_with_first_hits([1, 2, 4, 20], gallery_size=20), "abc", "in")
    assert (rep.rank1, rep.rank5, rep.rank10, rep.n_queries) == (0.25, 0.75, 0.75, 4)
    assert "Rank-1" in rep.table() and "25.00%" in rep.table()
    assert RankKReport(**json.loads(rep.to_json())) == rep


# ---------------------------------------------------------------- end-to-end on the toy set


@pytest.fixture(scope="module")
def scratch_ckpt(toy_manifest, toy_pretrained):
    return finetune_loop(toy_manifest, None, toy_finetune_config(epochs=0, encoder=toy_pretrained["config"]["encoder"]))


def test_random_model_is_near_chance(toy_manifest, scratch_ckpt):
    rep = evaluate(scratch_ckpt, toy_manifest)
    assert rep.n_queries == 128
    assert rep.rank1 < 0.15  # chance is 1/32


def test_evaluate_is_deterministic(toy_manifest, toy_pretrained):
    assert evaluate(toy_pretrained, toy_manifest) == evaluate(toy_pretrained, toy_manifest)


def test_cross_domain_same_manifest_matches(toy_manifest, toy_pretrained):
    a = evaluate(toy_pretrained, toy_manifest)
    b = cross_domain_evaluate(toy_pretrained, toy_manifest)
    assert (a.rank1, a.rank5, a.rank10, a.n_queries) == (b.rank1, b.rank5, b.rank10, b.n_queries)
    assert b.domain == "cross"


def test_cross_domain_unknown_words_fall_back(toy_pretrained):
    from t2ireid.toy import toy_benchmark

    alt = toy_benchmark(0, alt_templates=True)
    vocab = Vocabulary(toy_pretrained["vocab"])
    words = {w for r in alt.split("query") for w in split_words(r.caption)}
    assert any(w not in vocab.index for w in words)
    rep = cross_domain_evaluate(toy_pretrained, alt)
    assert rep.n_queries == 128 and 0.0 <= rep.rank1 <= 1.0


def test_evaluate_needs_query_and_gallery(toy_manifest, toy_pretrained):
    from t2ireid.data import DatasetManifest

    with pytest.raises(EvaluationError):
        evaluate(toy_pretrained, DatasetManifest(toy_manifest.split("query").records))
