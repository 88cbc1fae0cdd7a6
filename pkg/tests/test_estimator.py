import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dura import DuraRetriever
from dura.data import GenConfig, generate
from dura.trainer import TrainConfig

SMALL = GenConfig(n_identities=16, images_per_identity=4, captions_per_image=2, n_test_identities=8,
                  noise_rate=0.2)
KW = dict(epochs=3, batch_size=16, warmup_epochs=1, emb_dim=8, kfs_hidden=8, dsh_mu=4, split_warmup_epochs=1)


@pytest.fixture(scope="module")
def fitted():
    tr, te = generate(SMALL), generate(SMALL, "test")
    return DuraRetriever(**KW).fit(tr, eval_set=te), tr, te


def test_params_roundtrip():
    est = DuraRetriever(tau_h=0.2, seed=3)
    p = est.get_params()
    assert p["tau_h"] == 0.2 and p["seed"] == 3
    cl = clone(est)
    assert cl.get_params() == p
    cfg = est.to_config()
    assert isinstance(cfg, TrainConfig) and cfg.loss.tau_h == 0.2 and cfg.loss.lambda2 == cfg.loss.lambda2_max
    assert DuraRetriever.from_config(cfg).get_params() == p


def test_not_fitted():
    with pytest.raises(NotFittedError):
        DuraRetriever().transform(generate(SMALL, "test"))


def test_bad_input():
    with pytest.raises(TypeError):
        DuraRetriever(**KW).fit(np.zeros((4, 4)))


def test_fit_transform_predict(fitted):
    est, tr, te = fitted
    assert est.n_features_in_ == tr.img_global.shape[1]
    assert len(est.logs_) == 3
    x, y = est.transform(te)
    assert x.shape == y.shape == (len(te), 8)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)
    pred = est.predict(te)
    assert pred.shape == (len(te),)
    assert set(pred) <= set(te.identity)
    rep = est.evaluate(te)
    assert est.score(te) == rep.rank1
    # predict is consistent with the Rank-1 of the report
    assert np.mean(pred == te.identity) * 100 == pytest.approx(rep.rank1)
    assert est.pair_evidence(tr).shape == (len(tr),)


def test_fit_is_deterministic(fitted):
    est, tr, te = fitted
    again = clone(est).fit(tr, eval_set=te)
    np.testing.assert_array_equal(again.transform(te)[0], est.transform(te)[0])


def test_feature_mismatch(fitted):
    est, _, _ = fitted
    other = generate(GenConfig(n_identities=8, images_per_identity=2, captions_per_image=2, feature_dim=16,
                               n_test_identities=4), "test")
    with pytest.raises(ValueError):
        est.transform(other)
