import numpy as np
import pytest
from scipy.special import expit

from openlid.backend import (
    PldaModel,
    ResidentCounter,
    classify,
    classify_batch,
    enroll_language,
    extract_representation,
    extract_representations,
    fit_ensemble,
    fit_lda,
    fit_plda,
    load_ensemble,
    save_ensemble,
    stratified_batches,
)
from openlid.backend.ensemble import _vote, ensemble_bytes, ensemble_from_bytes
from openlid.backend.lda import within_class_metric
from openlid.corpus import LanguageRegistry
from openlid.errors import (
    DegenerateBatch,
    DuplicateCode,
    InsufficientExamples,
    ShapeError,
    StratificationError,
    VersionMismatch,
)
from openlid.nn import TdnnConfig, TdnnModel

GRID = np.linspace(-4.0, 4.0, 101)


def blobs(n_per, n_cls, dim, seed, spread=3.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(n_cls, dim))
    y = np.repeat(np.arange(n_cls), n_per)
    x = centers[y] + rng.normal(size=(len(y), dim))
    return x, [f"c{v:02d}" for v in y]


def plug_in_posterior(x, n):
    """Bayes posterior of the upper class from ML Gaussian fits with pooled variance."""
    m0, m1 = x[:n].mean(), x[n:].mean()
    var = (((x[:n] - m0) ** 2).sum() + ((x[n:] - m1) ** 2).sum()) / (2 * n - 2)
    return expit(((GRID - m0) ** 2 - (GRID - m1) ** 2) / (2 * var))


def two_gaussians(n, seed):
    rng = np.random.default_rng(seed)
    x = np.r_[rng.normal(-2, 1, n), rng.normal(2, 1, n)]
    return x, ["a"] * n + ["b"] * n


class TestLda:
    @pytest.mark.parametrize("n_cls", [2, 5, 19, 20])
    def test_rank_law(self, n_cls):
        x, y = blobs(6, n_cls, 40, n_cls)
        assert fit_lda(x, y, 18).k == min(18, n_cls - 1)

    def test_separation(self):
        # signal lives in 2 of 300 dims; Fisher ratio of the projection must be large
        rng = np.random.default_rng(0)
        y = np.repeat([0, 1, 2], 40)
        x = rng.normal(size=(120, 300))
        x[:, :2] += np.array([[0, 0], [4, 0], [0, 4]])[y]
        labels = [str(v) for v in y]
        z = fit_lda(x, labels, 18).transform(x)
        means = np.array([z[y == c].mean(0) for c in range(3)])
        within = np.mean([z[y == c].var(0) for c in range(3)], axis=0)
        assert np.all(means.var(0) / within > 5)

    def test_high_dim_small_sample(self):
        x, y = blobs(10, 4, 5000, 1)
        proj = fit_lda(x, y, 18)
        assert proj.projection.shape == (5000, 3)
        vt, var, floor = within_class_metric(x, y)
        assert vt.shape[0] <= 40 - 4 and floor > 0

    def test_degenerate(self):
        with pytest.raises(DegenerateBatch):
            fit_lda(np.zeros((4, 3)), ["a"] * 4)
        with pytest.raises(DegenerateBatch):
            fit_lda(np.random.default_rng(0).normal(size=(3, 3)), ["a", "a", "b"])


class TestPlda:
    @pytest.mark.parametrize("seed", range(10))
    def test_plug_in_bayes_oracle(self, seed):
        x, y = two_gaussians(500, seed)
        post = fit_plda(x[:, None], y).posteriors(GRID[:, None])[:, 1]
        assert np.max(np.abs(post - plug_in_posterior(x, 500))) < 0.05

    def test_true_parameter_oracle_large_sample(self):
        x, y = two_gaussians(20000, 0)
        post = fit_plda(x[:, None], y).posteriors(GRID[:, None])[:, 1]
        # log-odds of N(2, 1) against N(-2, 1) is 4x
        assert np.max(np.abs(post - expit(4 * GRID))) < 0.05

    def test_zero_between_gives_uniform(self):
        x, y = blobs(20, 3, 4, 2)
        m = fit_plda(x, y)
        flat = PldaModel(m.mean, np.zeros_like(m.between), m.within, m.class_means, m.class_counts, m.labels)
        np.testing.assert_allclose(flat.posteriors(x), 1 / 3, atol=1e-12)

    def test_affine_invariance(self):
        x, y = blobs(30, 4, 5, 3)
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 5)) + 3 * np.eye(5)
        b = rng.normal(size=5)
        probe = rng.normal(scale=3, size=(50, 5))
        p = fit_plda(x, y).posteriors(probe)
        q = fit_plda(x @ a.T + b, y).posteriors(probe @ a.T + b)
        np.testing.assert_allclose(p, q, atol=1e-6)

    def test_rows_are_distributions(self):
        x, y = blobs(15, 5, 6, 4)
        p = fit_plda(x, y).posteriors(x)
        np.testing.assert_allclose(p.sum(1), 1, atol=1e-12)
        labels, conf = fit_plda(x, y).predict(x)
        assert np.mean(np.array(labels) == np.array(y)) > 0.9 and np.all(conf <= 1)

    def test_shape_error(self):
        x, y = blobs(5, 2, 3, 5)
        with pytest.raises(ShapeError):
            fit_plda(x, y).posteriors(np.zeros((2, 4)))


class TestVote:
    def test_majority_example(self):
        assert _vote(["A", "A", "B"], [0.9, 0.8, 0.6]) == ("A", pytest.approx(0.85), 2)

    def test_tie_lexicographic(self):
        assert _vote(["B", "A"], [0.5, 0.5])[0] == "A"

    def test_single_member(self):
        assert _vote(["Z"], [0.3]) == ("Z", 0.3, 1)


class Store:
    """Deterministic synthetic representation vectors keyed by id."""

    def __init__(self, n_per: dict[str, int], dim=24, seed=0):
        rng = np.random.default_rng(seed)
        self.vectors, self.labels = {}, {}
        for ci, (lab, n) in enumerate(sorted(n_per.items())):
            center = np.random.default_rng([seed, ci]).normal(scale=2.0, size=dim)
            for i in range(n):
                vid = f"{lab}/{i:05d}"
                self.vectors[vid] = center + rng.normal(size=dim)
                self.labels[vid] = lab
        self.loads = 0

    def ids(self, lab=None):
        return sorted(v for v in self.vectors if lab is None or self.labels[v] == lab)

    def __call__(self, ids):
        self.loads += 1
        return np.stack([self.vectors[i] for i in ids])


def fit_store(store, ids, budget=4000, batch=4000, seed=0):
    counter = ResidentCounter(budget)
    batches = stratified_batches(ids, [store.labels[i] for i in ids], batch, seed)
    ens = fit_ensemble(batches, store, k=18, counter=counter, config={"k": 18, "shrinkage": 1e-8})
    return ens, counter


class TestEnsemble:
    def test_memory_bound_and_members(self):
        store = Store({"a": 3000, "b": 3000, "c": 3000, "d": 3000}, dim=8)
        ens, counter = fit_store(store, store.ids())
        assert len(ens.members) == 3
        assert counter.peak <= 4000 and counter.current == 0
        assert all(len(b) <= 4000 for b in ens.batch_manifest)

    def test_budget_enforced(self):
        store = Store({"a": 60, "b": 60}, dim=4)
        with pytest.raises(MemoryError):
            fit_store(store, store.ids(), budget=50, batch=100)

    def test_stratification(self):
        ids = [f"{lab}{i}" for lab in "abc" for i in range(25)]
        labels = [i[0] for i in ids]
        batches = stratified_batches(ids, labels, 20, seed=1)
        assert len(batches) == 4
        for b in batches:
            counts = {lab: sum(1 for _, l2 in b if l2 == lab) for lab in "abc"}
            assert max(counts.values()) - min(counts.values()) <= 1 and len(b) <= 20
        with pytest.raises(StratificationError):
            stratified_batches(ids[:27], labels[:27], 10)

    def test_deterministic(self):
        store = Store({"a": 50, "b": 50, "c": 50})
        a, _ = fit_store(store, store.ids(), batch=60, seed=3)
        b, _ = fit_store(store, list(reversed(store.ids())), batch=60, seed=3)
        assert ensemble_bytes(a) == ensemble_bytes(b)

    def test_classify(self):
        store = Store({"a": 80, "b": 80, "c": 80}, seed=1)
        ens, _ = fit_store(store, store.ids(), batch=100)
        probe = Store({"a": 20, "b": 20, "c": 20}, seed=1)  # same centres, fresh noise
        decisions = classify_batch(ens, probe(probe.ids()))
        acc = np.mean([d.label == probe.labels[i] for d, i in zip(decisions, probe.ids())])
        assert acc > 0.95
        d = classify(ens, probe(probe.ids()[:1])[0])
        assert d.n_members == 3 and 1 <= d.votes <= 3 and 0 <= d.confidence <= 1
        with pytest.raises(ShapeError):
            classify(ens, np.zeros(3))

    def test_serialization(self, tmp_path):
        store = Store({"a": 40, "b": 40})
        ens, _ = fit_store(store, store.ids(), batch=50)
        save_ensemble(ens, tmp_path / "e.lide")
        back = load_ensemble(tmp_path / "e.lide")
        assert ensemble_bytes(back) == ensemble_bytes(ens)
        x = store(store.ids())
        assert classify_batch(back, x) == classify_batch(ens, x)
        blob = bytearray(ensemble_bytes(ens))
        blob[:4] = b"XXXX"
        with pytest.raises(VersionMismatch):
            ensemble_from_bytes(bytes(blob))


class TestEnrollment:
    def setup_method(self):
        self.store = Store({"fra": 120, "deu": 120, "ita": 120, "spa": 150}, seed=5)
        old = [i for i in self.store.ids() if not i.startswith("spa")]
        self.ens, _ = fit_store(self.store, old, batch=150)
        self.reg = LanguageRegistry(["eng"], ["fra", "deu", "ita"])

    def test_enroll(self):
        new_ids = self.store.ids("spa")
        enroll, rest = new_ids[:60], new_ids[60:]
        state = {"calls": 0}

        def fingerprint():
            state["calls"] += 1
            return "fixed"

        before = ensemble_bytes(self.ens)
        ens2, reg2 = enroll_language(self.ens, "spa", enroll, self.store, self.reg, fingerprint=fingerprint)
        assert ensemble_bytes(self.ens) == before, "input ensemble must be left untouched"
        assert state["calls"] == 2 and "spa" in reg2 and "spa" not in self.reg
        assert "spa" in ens2.labels and len(ens2.members) == len(self.ens.members)
        acc = np.mean([d.label == "spa" for d in classify_batch(ens2, self.store(rest))])
        assert acc > 0.6
        old = [i for i in self.store.ids() if not i.startswith("spa")]
        truth = [self.store.labels[i] for i in old]
        acc_before = np.mean([d.label == t for d, t in zip(classify_batch(self.ens, self.store(old)), truth)])
        acc_after = np.mean([d.label == t for d, t in zip(classify_batch(ens2, self.store(old)), truth)])
        assert acc_before - acc_after < 0.10

    def test_errors(self):
        with pytest.raises(DuplicateCode):
            enroll_language(self.ens, "fra", self.store.ids("spa"), self.store, self.reg)
        with pytest.raises(DuplicateCode):
            enroll_language(self.ens, "eng", self.store.ids("spa"), self.store, self.reg)
        with pytest.raises(InsufficientExamples):
            enroll_language(self.ens, "spa", self.store.ids("spa")[:49], self.store, self.reg)

    def test_fingerprint_change_detected(self):
        seq = iter(["a", "b"])
        with pytest.raises(RuntimeError):
            enroll_language(self.ens, "spa", self.store.ids("spa"), self.store, self.reg,
                            fingerprint=lambda: next(seq))


class TestRepresentation:
    model = TdnnModel.init(TdnnConfig(), seed=0)

    def test_length(self):
        x = np.random.default_rng(0).normal(size=(398, 16))
        assert extract_representation(self.model, x).shape == (392 * 256,)
        assert extract_representation(self.model, x, "mean").shape == (256,)

    def test_identical_segments(self):
        x = np.random.default_rng(1).normal(size=(398, 16)).astype(np.float32)
        r = extract_representations(self.model, np.stack([x, x]))
        assert r[0].tobytes() == r[1].tobytes()

    def test_frame_order_matters(self):
        x = np.random.default_rng(2).normal(size=(398, 16))
        assert not np.allclose(extract_representation(self.model, x), extract_representation(self.model, x[::-1]))
