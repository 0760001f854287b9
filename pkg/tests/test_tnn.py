import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biofuse.corpus import Modality
from biofuse.errors import (
    DivergenceError,
    MiningError,
    ModelFormatError,
    ShapeError,
    ValidationError,
)
from biofuse.preprocess import GRID_POINTS, PairedSample, Sample
from biofuse.tnn import (
    ArchKind,
    EmbeddingModel,
    TrainConfig,
    Triplet,
    backward,
    embed_parts,
    fusion_arch,
    load_model,
    make_batches,
    mine_triplets,
    save_model,
    single_modality_arch,
    train,
    triplet_loss,
)
from biofuse.tnn.arch import ArchSpec, ConvSpec, DenseSpec, PoolSpec
from biofuse.tnn.loss import _triplet_embedding_grads
from oracles import oracle_mine


def _brain_sample(seed=0, subject="s00", round_id=0, t0=0.0):
    data = np.random.default_rng(seed).standard_normal((14, GRID_POINTS)).astype(np.float32)
    return Sample(subject_id=subject, round_id=round_id, modality=Modality.BRAIN,
                  data=data, t0=t0)


def _eye_sample(seed=0, subject="s00", round_id=0, t0=0.0, modality=Modality.EYE_PUPIL):
    data = np.random.default_rng(100 + seed).standard_normal(
        (modality.n_channels, GRID_POINTS)
    ).astype(np.float32)
    return Sample(subject_id=subject, round_id=round_id, modality=modality,
                  data=data, t0=t0)


class TestEmbed:
    def test_unit_norm(self):
        model = EmbeddingModel(single_modality_arch(Modality.BRAIN), seed=1)
        emb = model.embed(_brain_sample())
        assert emb.shape == (32,)
        assert abs(np.linalg.norm(emb) - 1.0) < 1e-6

    def test_deterministic(self):
        model = EmbeddingModel(single_modality_arch(Modality.BRAIN), seed=1)
        a = model.embed(_brain_sample(3))
        b = model.embed(_brain_sample(3))
        assert a.tobytes() == b.tobytes()

    def test_fusion_a_concatenates_branch_outputs(self):
        model = EmbeddingModel(fusion_arch(ArchKind.FUSION_A), seed=2)
        pair = PairedSample(brain=_brain_sample(), eye=_eye_sample())
        parts = embed_parts(model, pair)
        assert [p.size for p in parts["branch_outputs"]] == [16, 16]
        concat = np.concatenate(parts["branch_outputs"])
        np.testing.assert_allclose(
            parts["embedding"], concat / np.linalg.norm(concat), atol=1e-6
        )
        emb = model.embed(pair)
        np.testing.assert_allclose(emb, parts["embedding"], atol=1e-6)

    def test_shape_mismatch(self):
        model = EmbeddingModel(single_modality_arch(Modality.BRAIN), seed=1)
        with pytest.raises(ShapeError):
            model.embed(_eye_sample())

    def test_fusion_model_rejects_single_sample(self):
        model = EmbeddingModel(fusion_arch(ArchKind.FUSION_A), seed=1)
        with pytest.raises(ShapeError):
            model.embed(_brain_sample())


class TestTripletLoss:
    def test_hinge_boundary(self):
        alpha = 0.25  # dyadic so d_an^2 == alpha holds exactly
        fa = np.zeros(4)
        fn = np.array([0.5, 0, 0, 0])
        assert triplet_loss(fa, fa, fn, alpha) == 0.0

    def test_inactive(self):
        fa = np.zeros(2)
        fp = np.array([1.0, 0.0])        # d_ap^2 = 1
        fn = np.array([np.sqrt(2.0), 0])  # d_an^2 = 2
        assert triplet_loss(fa, fp, fn, 0.5) == 0.0

    def test_active_value(self):
        fa = np.zeros(2)
        fp = np.array([np.sqrt(2.0), 0])  # d_ap^2 = 2
        fn = np.array([1.0, 0.0])         # d_an^2 = 1
        assert triplet_loss(fa, fp, fn, 0.2) == pytest.approx(1.2)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(0.01, 2.0))
    def test_nonnegative_and_zero_iff(self, flat, alpha):
        fa, fp, fn = (np.array(flat[i:i + 3]) for i in (0, 3, 6))
        loss = triplet_loss(fa, fp, fn, alpha)
        d_ap = ((fa - fp) ** 2).sum()
        d_an = ((fa - fn) ** 2).sum()
        assert loss >= 0.0
        assert (loss == 0.0) == (d_ap + alpha <= d_an)


class TestMining:
    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(4)
        emb = rng.standard_normal((9, 8))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        labels = ["a", "a", "a", "b", "b", "b", "c", "c", "c"]
        got = [(t.anchor, t.positive, t.negative) for t in mine_triplets(emb, labels, 0.4)]
        assert got == oracle_mine(emb.tolist(), labels, 0.4)

    def test_fallback_to_hardest(self):
        # same-subject points coincide; every negative is farther than d_ap + margin
        emb = np.array([[0.0, 0], [0.0, 0], [5.0, 0], [6.0, 0]])
        labels = ["a", "a", "b", "b"]
        triplets = mine_triplets(emb, labels, 0.2)
        for t in triplets:
            if labels[t.anchor] == "a":
                assert t.negative == 2  # the nearest (hardest) negative
        assert got_all_pairs(triplets, labels)

    def test_single_subject_batch(self):
        emb = np.eye(3)
        with pytest.raises(MiningError):
            mine_triplets(emb, ["a", "a", "a"], 0.2)

    def test_no_positive_pairs(self):
        emb = np.eye(3)
        with pytest.raises(MiningError):
            mine_triplets(emb, ["a", "b", "c"], 0.2)


def got_all_pairs(triplets, labels):
    pairs = {(t.anchor, t.positive) for t in triplets}
    expected = {
        (a, p)
        for a in range(len(labels))
        for p in range(len(labels))
        if a != p and labels[a] == labels[p]
    }
    return pairs == expected


def _tiny_arch(seed):
    rng = np.random.default_rng(seed)
    layers = []
    c = int(rng.integers(2, 4))
    t = int(rng.integers(12, 20))
    if rng.random() < 0.8:
        layers.append(ConvSpec(kernel=int(rng.integers(2, 5)), filters=int(rng.integers(1, 3))))
        if rng.random() < 0.5:
            layers.append(PoolSpec(width=2))
    if rng.random() < 0.5:
        layers.append(DenseSpec(width=int(rng.integers(3, 8))))
    layers.append(DenseSpec(width=32))
    arch = ArchSpec(
        kind=ArchKind.SINGLE, input_channels=(c,),
        branch_layers=(tuple(layers),), input_points=t,
    )
    return arch, c, t


class TestBackward:
    def test_inactive_triplets_zero_gradient(self):
        arch, c, t = _tiny_arch(0)
        model = EmbeddingModel(arch, seed=0, dtype=np.float64)
        rng = np.random.default_rng(1)
        feats = [(rng.standard_normal((c, t)),) for _ in range(4)]
        # anchor == positive gives d_ap = 0; with a tiny margin the hinge is
        # inactive unless the negative embedding coincides with the anchor
        from biofuse.tnn.network import forward_batch, stack_inputs

        emb, _ = forward_batch(model, stack_inputs(feats, model), with_cache=False)
        assert ((emb[0] - emb[1]) ** 2).sum() > 1e-6
        grad, loss = backward(model, feats, [Triplet(0, 0, 1)], margin=1e-12)
        assert loss == 0.0
        assert not grad.any()

    def test_duplicate_triplet_same_mean_gradient(self):
        arch, c, t = _tiny_arch(3)
        model = EmbeddingModel(arch, seed=3, dtype=np.float64)
        rng = np.random.default_rng(2)
        feats = [(rng.standard_normal((c, t)),) for _ in range(4)]
        tri = Triplet(0, 1, 2)
        g1, l1 = backward(model, feats, [tri], margin=0.5)
        g2, l2 = backward(model, feats, [tri, tri], margin=0.5)
        np.testing.assert_allclose(g1, g2, atol=1e-12)
        assert l1 == pytest.approx(l2)

    def test_finite_difference_small_arch(self):
        arch, c, t = _tiny_arch(1)
        model = EmbeddingModel(arch, seed=1, dtype=np.float64)
        rng = np.random.default_rng(1001)
        feats = [(rng.standard_normal((c, t)),) for _ in range(6)]
        triplets = [Triplet(0, 1, 2), Triplet(3, 4, 5)]
        grad, _ = backward(model, feats, triplets, margin=0.5)
        eps = 1e-4
        fd = np.empty_like(grad)
        from biofuse.tnn.network import forward_batch, stack_inputs

        def loss_at():
            emb, _ = forward_batch(model, stack_inputs(feats, model), with_cache=False)
            return _triplet_embedding_grads(emb, triplets, 0.5)[1]

        for i in range(model.weights.size):
            orig = model.weights[i]
            model.weights[i] = orig + eps
            lp = loss_at()
            model.weights[i] = orig - eps
            lm = loss_at()
            model.weights[i] = orig
            fd[i] = (lp - lm) / (2 * eps)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), np.linalg.norm(fd))
        assert rel < 1e-4

    def test_permutation_invariance_of_mean_loss(self):
        arch, c, t = _tiny_arch(2)
        model = EmbeddingModel(arch, seed=2, dtype=np.float64)
        rng = np.random.default_rng(7)
        feats = [(rng.standard_normal((c, t)),) for _ in range(6)]
        triplets = [Triplet(0, 1, 2), Triplet(3, 4, 5), Triplet(1, 0, 3), Triplet(4, 3, 0)]
        _, l1 = backward(model, feats, triplets, margin=0.5)
        _, l2 = backward(model, feats, list(reversed(triplets)), margin=0.5)
        assert abs(l1 - l2) < 1e-12


def _toy_dataset(n_subjects=4, per_subject=8, center_scale=0.5, noise=1.0):
    rng = np.random.default_rng(0)
    samples = []
    for si in range(n_subjects):
        center = rng.standard_normal((14, GRID_POINTS)) * center_scale
        for k in range(per_subject):
            data = (center + noise * rng.standard_normal((14, GRID_POINTS))).astype(np.float32)
            samples.append(
                Sample(subject_id=f"s{si:02d}", round_id=k % 2, modality=Modality.BRAIN,
                       data=data, t0=float(k))
            )
    return samples


class TestTrain:
    def test_lr_zero_is_noop(self):
        samples = _toy_dataset()
        cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=0.0, seed=5)
        model, _ = train(samples, single_modality_arch(Modality.BRAIN), cfg)
        fresh = EmbeddingModel(single_modality_arch(Modality.BRAIN), seed=5)
        assert model.weights.tobytes() == fresh.weights.tobytes()

    def test_deterministic(self):
        samples = _toy_dataset()
        cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3, seed=5)
        m1, h1 = train(samples, single_modality_arch(Modality.BRAIN), cfg)
        m2, h2 = train(samples, single_modality_arch(Modality.BRAIN), cfg)
        assert m1.weights.tobytes() == m2.weights.tobytes()
        assert h1 == h2

    def test_loss_decreases_on_separable_toy(self):
        samples = _toy_dataset(n_subjects=6, per_subject=8)
        cfg = TrainConfig(epochs=4, batch_size=24, learning_rate=1e-3, seed=0)
        _, history = train(samples, single_modality_arch(Modality.BRAIN), cfg)
        assert history[-1] < history[0]

    def test_divergence_guard(self):
        samples = _toy_dataset()
        cfg = TrainConfig(epochs=1, batch_size=16, learning_rate=1e38, optimizer="sgd", seed=0)
        with np.errstate(invalid="ignore", over="ignore"):
            with pytest.raises(DivergenceError, match="step"):
                train(samples, single_modality_arch(Modality.BRAIN), cfg)

    def test_single_subject_rejected(self):
        samples = [s for s in _toy_dataset() if s.subject_id == "s00"]
        with pytest.raises(ValidationError):
            train(samples, single_modality_arch(Modality.BRAIN), TrainConfig(epochs=1))

    def test_batches_partition_and_are_mineable(self):
        labels = [f"s{i % 5}" for i in range(53)]
        rng = np.random.default_rng(0)
        batches = make_batches(labels, rng, batch_size=16, per_subject=4)
        flat = sorted(i for b in batches for i in b)
        assert flat == list(range(53))
        for b in batches:
            labs = [labels[i] for i in b]
            assert len(set(labs)) >= 2
            assert max(labs.count(x) for x in set(labs)) >= 2


class TestModelFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        samples = _toy_dataset()
        cfg = TrainConfig(epochs=1, batch_size=16, seed=3)
        model, _ = train(samples, single_modality_arch(Modality.BRAIN), cfg)
        path = tmp_path / "m.model"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.weights.tobytes() == model.weights.tobytes()
        assert loaded.arch == model.arch
        assert loaded.provenance == model.provenance
        # a second save is byte-identical
        path2 = tmp_path / "m2.model"
        save_model(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file(self, tmp_path):
        model = EmbeddingModel(single_modality_arch(Modality.BRAIN), seed=0)
        path = tmp_path / "m.model"
        save_model(model, path)
        raw = path.read_bytes()
        cut = raw.find(b"WEIGHTS ")
        cut = raw.find(b"\n", cut) + 64  # 64 bytes into the payload
        (tmp_path / "t.model").write_bytes(raw[:cut])
        with pytest.raises(ModelFormatError, match="truncated"):
            load_model(tmp_path / "t.model")
        # cutting inside the header is also a parse error
        (tmp_path / "h.model").write_bytes(raw[:40])
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "h.model")

    def test_wrong_magic_and_version(self, tmp_path):
        p = tmp_path / "x.model"
        p.write_bytes(b"BIOFUSE-MODEL v9\nARCH {}\n")
        with pytest.raises(ModelFormatError, match="version"):
            load_model(p)
        p.write_bytes(b"nonsense")
        with pytest.raises(ModelFormatError):
            load_model(p)

    def test_loaded_fusion_model_rejects_single_modality_input(self, tmp_path):
        model = EmbeddingModel(fusion_arch(ArchKind.FUSION_A), seed=0)
        path = tmp_path / "f.model"
        save_model(model, path)
        loaded = load_model(path)
        with pytest.raises(ShapeError):
            loaded.embed(_brain_sample())

    def test_float64_model_not_serializable(self, tmp_path):
        model = EmbeddingModel(single_modality_arch(Modality.BRAIN), seed=0, dtype=np.float64)
        with pytest.raises(ValidationError):
            save_model(model, tmp_path / "m.model")
