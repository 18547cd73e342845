"""Retrieval banks, zero-shot embedding, and ranking-metric fixtures."""

import math

import numpy as np
import pytest
import torch

from trajrep.geo import GpsPoint, Trajectory
from trajrep.retrieval import (
    BankFormatError,
    RetrievalBank,
    build_bank,
    embed_sequences,
    evaluate,
    load_bank,
    save_bank,
)


def make_bank(n_c=25):
    """One query; corpus item j has DTW distance j+1 (item 0 is nearest)."""
    return RetrievalBank(
        query_ids=["q0"],
        corpus_ids=[f"c{j:02d}" for j in range(n_c)],
        dtw=np.arange(1.0, n_c + 1.0)[None, :],
        seed=0,
    )


def embeddings_for_order(order, n_c, dim=2):
    """Unit embeddings ranking the corpus exactly in ``order``."""
    query = np.zeros((1, dim))
    query[0, 0] = 1.0
    corpus = np.zeros((n_c, dim))
    for rank, j in enumerate(order):
        angle = 0.01 + 0.05 * rank  # strictly increasing -> decreasing cosine
        corpus[j, 0] = math.cos(angle)
        corpus[j, 1] = math.sin(angle)
    return query, corpus


def dcg_positions(positions):
    """DCG of binary gains at the given 1-based ranks."""
    return sum(1.0 / math.log2(p + 1) for p in positions)


class TestMetricFixtures:
    def test_perfect_ranking_all_ones(self):
        bank = make_bank()
        q, c = embeddings_for_order(list(range(25)), 25)
        rep = evaluate(bank, q, c, ndcg_ks=(5, 10))
        assert rep.hr_at_1 == 1.0
        assert rep.hr_at_10 == 1.0
        assert rep.r5_at_20 == 1.0
        assert rep.mrr == 1.0
        assert rep.ndcg[5] == 1.0 and rep.ndcg[10] == 1.0
        assert rep.spearman == pytest.approx(1.0, abs=1e-12)

    def test_fixture_nearest_at_rank_three(self):
        # ranking [1, 2, 0, 3, 5..20, 4, rest]: the DTW-nearest item 0 sits
        # at rank 3 and item 4 is pushed to rank 21
        order = [1, 2, 0, 3] + list(range(5, 21)) + [4] + list(range(21, 25))
        bank = make_bank()
        q, c = embeddings_for_order(order, 25)
        rep = evaluate(bank, q, c, ndcg_ks=(5,))
        assert rep.hr_at_1 == 0.0
        assert rep.hr_at_10 == 1.0
        assert rep.mrr == pytest.approx(1.0 / 3.0, rel=1e-12)
        assert rep.r5_at_20 == pytest.approx(4.0 / 5.0, rel=1e-12)  # item 4 at rank 21
        # top-5 retrieved = [1, 2, 0, 3, 5]: relevant {0..4} hit at ranks 1-4
        expected_ndcg5 = dcg_positions([1, 2, 3, 4]) / dcg_positions([1, 2, 3, 4, 5])
        assert rep.ndcg[5] == pytest.approx(expected_ndcg5, rel=1e-12)

    def test_fixture_nearest_at_rank_six(self):
        # ranking [5..9, 0..4, 10..]: no relevant item in the top 5
        order = list(range(5, 10)) + list(range(0, 5)) + list(range(10, 25))
        bank = make_bank()
        q, c = embeddings_for_order(order, 25)
        rep = evaluate(bank, q, c, ndcg_ks=(5, 10))
        assert rep.hr_at_1 == 0.0
        assert rep.hr_at_10 == 1.0
        assert rep.mrr == pytest.approx(1.0 / 6.0, rel=1e-12)
        assert rep.r5_at_20 == 1.0
        assert rep.ndcg[5] == 0.0
        # NDCG@10: relevant {0..9}; all of the top 10 retrieved are relevant
        assert rep.ndcg[10] == pytest.approx(1.0, rel=1e-12)

    def test_fixture_interleaved(self):
        # ranking [0, 5, 1, 6, 2, 7, 3, 8, 4, 9, rest]
        order = [0, 5, 1, 6, 2, 7, 3, 8, 4, 9] + list(range(10, 25))
        bank = make_bank()
        q, c = embeddings_for_order(order, 25)
        rep = evaluate(bank, q, c, ndcg_ks=(5,))
        assert rep.hr_at_1 == 1.0
        assert rep.mrr == 1.0
        assert rep.r5_at_20 == 1.0
        # top-5 retrieved = [0, 5, 1, 6, 2]: relevant at ranks 1, 3, 5
        expected = dcg_positions([1, 3, 5]) / dcg_positions([1, 2, 3, 4, 5])
        assert rep.ndcg[5] == pytest.approx(expected, rel=1e-12)

    def test_adjacent_swap_never_improves_mrr_or_ndcg(self):
        bank = make_bank()
        base_order = list(range(25))
        q, c = embeddings_for_order(base_order, 25)
        base = evaluate(bank, q, c, ndcg_ks=(5, 10))
        for swap_at in range(24):
            order = list(base_order)
            order[swap_at], order[swap_at + 1] = order[swap_at + 1], order[swap_at]
            q2, c2 = embeddings_for_order(order, 25)
            rep = evaluate(bank, q2, c2, ndcg_ks=(5, 10))
            assert rep.mrr <= base.mrr + 1e-12
            for k in (5, 10):
                assert rep.ndcg[k] <= base.ndcg[k] + 1e-12

    def test_corpus_presentation_order_invariance(self):
        bank = make_bank()
        order = [3, 0, 7, 1] + list(range(8, 25)) + [2, 4, 5, 6]
        q, c = embeddings_for_order(order, 25)
        base = evaluate(bank, q, c, ndcg_ks=(5,))
        rng = np.random.default_rng(11)
        perm = rng.permutation(25)
        shuffled = RetrievalBank(
            query_ids=bank.query_ids,
            corpus_ids=[bank.corpus_ids[j] for j in perm],
            dtw=bank.dtw[:, perm],
            seed=bank.seed,
        )
        rep = evaluate(shuffled, q, c[perm], ndcg_ks=(5,))
        assert rep.hr_at_1 == base.hr_at_1
        assert rep.mrr == pytest.approx(base.mrr, rel=1e-12)
        assert rep.ndcg[5] == pytest.approx(base.ndcg[5], rel=1e-12)
        assert rep.spearman == pytest.approx(base.spearman, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        bank = make_bank()
        q, c = embeddings_for_order(list(range(25)), 25)
        with pytest.raises(ValueError):
            evaluate(bank, q, c[:-1])
        with pytest.raises(ValueError):
            evaluate(bank, q[:, :1], c)


def small_trajectories(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        length = int(rng.integers(2, 12))
        pts = [
            GpsPoint(float(rng.uniform(41.1, 41.22)), float(rng.uniform(-8.7, -8.53)), 15 * j)
            for j in range(length)
        ]
        out.append(Trajectory(id=f"t{i:03d}", points=pts))
    return out


class TestBank:
    def test_build_shapes_and_disjointness(self):
        trajs = small_trajectories(12, seed=1)
        bank = build_bank(trajs, n_q=3, n_c=6, seed=4)
        assert bank.dtw.shape == (3, 6)
        assert not set(bank.query_ids) & set(bank.corpus_ids)
        from trajrep.dtw import dtw

        by_id = {t.id: t for t in trajs}
        for i, qid in enumerate(bank.query_ids):
            for j, cid in enumerate(bank.corpus_ids):
                assert bank.dtw[i, j] == dtw(by_id[qid], by_id[cid])

    def test_insufficient_data_rejected(self):
        with pytest.raises(ValueError):
            build_bank(small_trajectories(5, seed=2), n_q=3, n_c=6, seed=0)

    def test_same_seed_byte_identical_files(self, tmp_path):
        trajs = small_trajectories(15, seed=3)
        for name in ("one", "two"):
            save_bank(build_bank(trajs, 3, 8, seed=9), tmp_path / f"{name}.bank")
        assert (tmp_path / "one.bank").read_bytes() == (tmp_path / "two.bank").read_bytes()

    def test_round_trip_and_corruption(self, tmp_path):
        bank = build_bank(small_trajectories(15, seed=5), 3, 8, seed=2, config_echo="{}")
        path = tmp_path / "bank.txt"
        save_bank(bank, path)
        loaded = load_bank(path)
        assert loaded.query_ids == bank.query_ids
        assert loaded.corpus_ids == bank.corpus_ids
        assert np.array_equal(loaded.dtw, bank.dtw)
        assert loaded.seed == bank.seed and loaded.config_echo == bank.config_echo
        corrupted = path.read_text().replace("seed=2", "seed=3", 1)
        path.write_text(corrupted)
        with pytest.raises(BankFormatError):
            load_bank(path)


@pytest.fixture(scope="module")
def model_and_seqs():
    from trajrep.grid import GridConfig
    from trajrep.encoder import DualStreamEncoder
    from trajrep.testutil import toy_config
    from trajrep.tokenizer import tokenize
    from trajrep.vocab import build_vocabulary

    trajs = small_trajectories(20, seed=7)
    cfg = GridConfig(backend="QUAD", bbox=(41.100, 41.220, -8.700, -8.530), r_min=2, r_max=5)
    vocab = build_vocabulary((p for t in trajs for p in t.points), cfg, capacity=30)
    seqs = [tokenize(vocab, t, max_len=16) for t in trajs]
    torch.manual_seed(21)
    model = DualStreamEncoder(toy_config(vocab_size=vocab.num_tokens))
    return model, seqs


class TestEmbedding:
    def test_unit_norm(self, model_and_seqs):
        model, seqs = model_and_seqs
        emb = embed_sequences(model, seqs, v_max=20.0)
        norms = np.linalg.norm(emb, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-9)

    def test_single_token_sequence(self, model_and_seqs):
        model, seqs = model_and_seqs
        one = [s for s in seqs if len(s) >= 1][0]
        single = type(one)(traj_id="single", tokens=[one.tokens[0]])
        emb = embed_sequences(model, [single], v_max=20.0)
        assert emb.shape == (1, model.cfg.d_model)
        assert np.linalg.norm(emb[0]) == pytest.approx(1.0, abs=1e-9)

    def test_padding_invariance(self, model_and_seqs):
        # a short sequence embeds identically whether batched with long
        # companions (heavy padding) or alone
        model, seqs = model_and_seqs
        ordered = sorted(seqs, key=len)
        short, longest = ordered[0], ordered[-1]
        assert len(longest) > len(short)
        together = embed_sequences(model, [short, longest], v_max=20.0)
        alone = embed_sequences(model, [short], v_max=20.0)
        assert np.abs(together[0] - alone[0]).max() <= 1e-9

    def test_pooling_streams(self, model_and_seqs):
        model, seqs = model_and_seqs
        geo = embed_sequences(model, seqs[:4], v_max=20.0, pooling="GEO")
        kin = embed_sequences(model, seqs[:4], v_max=20.0, pooling="KIN")
        both = embed_sequences(model, seqs[:4], v_max=20.0, pooling="SUM")
        assert not np.allclose(geo, kin)
        assert not np.allclose(geo, both)
        with pytest.raises(ValueError):
            embed_sequences(model, seqs[:4], v_max=20.0, pooling="MAX")
