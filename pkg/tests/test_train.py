import math

import numpy as np
import pytest

from bitro import numerics as nx
from bitro.cluster import cluster_loss
from bitro.model import collate, forward, model_config
from bitro.train import loop
from bitro.train.lora import ConfigError, attach_lora, merge, resolve_weights
from bitro.train.loop import EarlyStopping, TrainConfig, TrainingError, fit, gene_loss, predict, total_loss
from bitro.train.params import CheckpointError, ParamTree, load_checkpoint, save_checkpoint
from bitro.train.transfer import TransferError, finetune, prepare_transfer, rehead

from conftest import TINY_ARCH, grad_check


def _forward(tree, bags, adapter=None):
    weights, _ = resolve_weights(tree, adapter, train=False)
    return forward(weights, model_config(tree), collate(bags)).pred.data


def _base_bytes(tree):
    return {n: tree.get(n).tobytes() for n in tree.names()}


# -- losses -----------------------------------------------------------------


def test_loss_examples():
    assert total_loss(np.array([[2.0]]), np.array([[0.0]]), lam=0).item() == 4.0
    y = np.ones((4, 2))
    assert total_loss(y, y, y, np.array([0, 0, 1, 1]), lam=0.3).item() == 0.0


def test_zero_lambda_is_exactly_the_gene_loss(rng):
    pred, target, y_cell = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(9, 4))
    labels = rng.integers(0, 3, 9)
    assert total_loss(pred, target, y_cell, labels, lam=0).item() == gene_loss(pred, target).item()
    both = total_loss(pred, target, y_cell, labels, lam=0.3).item()
    assert np.isclose(both, gene_loss(pred, target).item() + 0.3 * cluster_loss(y_cell, labels).item())


def test_total_loss_gradient(rng):
    target, labels = rng.normal(size=(2, 3)), np.array([0, 0, 1, 1, 1])
    inputs = {"p": rng.normal(size=(2, 3)), "y": rng.normal(size=(5, 3))}
    assert grad_check(lambda t: total_loss(t["p"], target, t["y"], labels, 0.3), inputs) < 1e-6


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        total_loss(np.zeros((1, 1)), np.zeros((1, 1)), lam=-1)


@pytest.mark.parametrize("kwargs", [dict(lr=0.01), dict(epochs=101), dict(patience=0), dict(lam=0.05),
                                    dict(dropout=0.5), dict(clip=0.0), dict(batch_size=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_config_defaults():
    tc = TrainConfig()
    assert (tc.patience, tc.epochs, tc.clip, tc.lam) == (6, 100, 1.0, 0.3)
    assert tc.resolved_batch_size("spot") == 32 and tc.resolved_batch_size("bulk") == 1


# -- early stopping ---------------------------------------------------------

SEQUENCE = [5, 4, 3, 3, 3, 3, 3, 3, 3]


def test_stopping_rule_simulation():
    stop = EarlyStopping(6)
    stopped = None
    for epoch, v in enumerate(SEQUENCE, start=1):
        if stop.update(epoch, v):
            stopped = epoch
            break
    assert stopped == 9 and stop.best_epoch == 3


def test_fit_stops_after_epoch_nine_with_epoch_three_weights(tiny_setup, monkeypatch):
    tree, train, val, _ = tiny_setup
    values = iter([10.0] + SEQUENCE + [3.0] * 20)
    digests = []
    real = loop.evaluate_loss

    def scripted(t, bags, adapter=None, batch_size=32):
        real(t, bags, adapter, batch_size)
        digests.append(t.digest())
        return next(values)

    monkeypatch.setattr(loop, "evaluate_loss", scripted)
    res = fit(tree, train, val, TrainConfig(lr=1e-3, epochs=20))
    assert res.stopped_epoch == 9 and res.best_epoch == 3
    assert res.tree.digest() == digests[3]
    assert res.val_losses() == [10.0] + SEQUENCE


def test_fit_is_deterministic(tiny_setup):
    tree, train, val, _ = tiny_setup
    tc = TrainConfig(lr=1e-3, epochs=3, batch_size=4)
    a, b = fit(tree, train, val, tc), fit(tree, train, val, tc)
    assert repr(a.history) == repr(b.history) and a.tree.digest() == b.tree.digest()


def test_fit_lowers_training_loss(tiny_setup):
    tree, train, val, _ = tiny_setup
    res = fit(tree, train, val, TrainConfig(lr=1e-3, epochs=10, batch_size=4))
    losses = [row["train_loss"] for row in res.history[1:]]
    assert losses[-1] < losses[0]


def test_fit_input_checks(tiny_setup):
    tree, train, val, _ = tiny_setup
    with pytest.raises(TrainingError):
        fit(tree, train, [], TrainConfig())
    with pytest.raises(TrainingError):
        fit(tree, train, train[:1], TrainConfig())


def test_nan_loss_names_the_step(tiny_setup):
    tree, train, val, _ = tiny_setup
    bad = tree.copy()
    bad.set("mil.w2", np.full_like(bad.get("mil.w2"), np.nan))
    with pytest.raises(TrainingError, match="epoch 1, step 0"):
        fit(bad, train, val, TrainConfig(lr=1e-3, epochs=1))


def test_model_gradients_match_finite_differences(tiny_setup):
    tree, train, _, _ = tiny_setup
    batch = collate(train[:2])
    cfg = model_config(tree)
    names = ["gat.0.head0.a", "trf.0.q", "mil.q_gene", "mil.w2"]
    base = {n: nx.Tensor(tree.get(n)) for n in tree.names()}

    def build(t):
        weights = dict(base, **t)
        out = forward(weights, cfg, batch)
        return total_loss(out.pred, batch.targets, out.cell_expression(), batch.labels, 0.3)

    assert grad_check(build, {n: tree.get(n) for n in names}) < 1e-4


# -- LoRA ---------------------------------------------------------------------


def test_lora_parameter_count():
    tree = ParamTree({})
    tree.add("w", np.zeros((128, 128)))
    _, ad = attach_lora(tree, ["w"], rank=4)
    assert ad.n_values() == 2 * 4 * 128
    assert tree.get("w").size == 16384


def test_lora_defaults_and_errors(tiny_setup):
    tree, *_ = tiny_setup
    frozen, ad = attach_lora(tree)
    assert (ad.rank, ad.alpha) == (8, 16.0)
    assert set(ad.targets) == {f"trf.0.{p}" for p in ("q", "k", "v", "o", "ffn_in", "ffn_out")} | \
        {"mil.q_gene", "mil.w1"}
    assert not any(frozen.is_trainable(n) for n in frozen.names())
    with pytest.raises(ConfigError):
        attach_lora(tree, ["nope"])
    with pytest.raises(ConfigError):
        attach_lora(tree, ["gat.0.head0.a"])


def test_zero_init_adapter_is_bit_identical(tiny_setup):
    tree, train, _, _ = tiny_setup
    frozen, ad = attach_lora(tree, seed=3)
    assert _forward(frozen, train, ad).tobytes() == _forward(tree, train).tobytes()


def test_lora_finetune_keeps_base_and_merge_matches(tiny_setup):
    tree, train, val, _ = tiny_setup
    frozen, ad = attach_lora(tree)
    res = fit(frozen, train, val, TrainConfig(lr=1e-3, epochs=5, patience=10, batch_size=4), adapter=ad)
    assert _base_bytes(res.tree) == _base_bytes(frozen)
    assert any(np.any(u != 0) for u in res.adapter.up.values())
    merged = merge(res.tree, res.adapter)
    np.testing.assert_allclose(_forward(merged, val), _forward(res.tree, val, res.adapter), atol=1e-12, rtol=0)


def test_checkpoint_round_trip(tiny_setup, tmp_path):
    tree, train, _, _ = tiny_setup
    frozen, ad = attach_lora(tree, rank=2)
    ad.up["mil.w1"] += 0.5
    frozen.set_row_mask("mil.q_gene", np.array([True, False, False, True, False]))
    save_checkpoint(tmp_path / "m.bitro", frozen, ad)
    back, ad2 = load_checkpoint(tmp_path / "m.bitro")
    assert back.digest() == frozen.digest() and back.header == frozen.header
    assert back.row_mask("mil.q_gene").tolist() == frozen.row_mask("mil.q_gene").tolist()
    assert [back.is_trainable(n) for n in back.names()] == [frozen.is_trainable(n) for n in frozen.names()]
    assert ad2.meta() == ad.meta()
    assert _forward(back, train, ad2).tobytes() == _forward(frozen, train, ad).tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACHECKPOINT")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")
    save_path = tmp_path / "t.bitro"
    tree = ParamTree({})
    tree.add("w", np.ones(4))
    save_checkpoint(save_path, tree)
    save_path.write_bytes(save_path.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(save_path)


# -- transfer -----------------------------------------------------------------


def _three_gene_tree():
    tree = ParamTree({"genes": ["A", "B", "C"], "dim": 4, "d_in": 4})
    tree.add("mil.q_gene", np.arange(12.0).reshape(3, 4))
    tree.add("mil.w1", np.ones((4, 4)))
    return tree


def test_rehead_row_trace():
    out, fresh = rehead(_three_gene_tree(), ["B", "C", "D"], seed=0)
    q = out.get("mil.q_gene")
    np.testing.assert_array_equal(q[0], np.arange(4.0, 8.0))
    np.testing.assert_array_equal(q[1], np.arange(8.0, 12.0))
    assert fresh.tolist() == [False, False, True]
    assert out.header["genes"] == ["B", "C", "D"]


def test_rehead_needs_overlap():
    with pytest.raises(TransferError):
        rehead(_three_gene_tree(), ["X", "Y"])


def test_zero_epoch_finetune_is_identity(tiny_setup):
    tree, train, val, _ = tiny_setup
    genes = model_config(tree).genes
    res = finetune(tree, genes, train, val, TrainConfig(lr=1e-3, epochs=0), direction="bulk2st")
    assert res.merged().digest() == tree.digest()


def test_lora_transfer_trains_only_fresh_rows(tiny_setup):
    tree, train, val, _ = tiny_setup
    genes = model_config(tree).genes[:-1] + ["NEW"]
    for b in train + val:
        assert len(b.target) == len(genes)
    res = finetune(tree, genes, train, val, TrainConfig(lr=1e-3, epochs=3, patience=10, batch_size=4),
                   direction="bulk2st")
    start, _, fresh = prepare_transfer(tree, genes, "bulk2st")
    q0, q1 = start.get("mil.q_gene"), res.tree.get("mil.q_gene")
    np.testing.assert_array_equal(q0[~fresh], q1[~fresh])
    assert np.any(q0[fresh] != q1[fresh])
    for n in res.tree.names():
        if n != "mil.q_gene":
            assert res.tree.get(n).tobytes() == start.get(n).tobytes()


def test_full_finetune_moves_base(tiny_setup):
    tree, train, val, _ = tiny_setup
    genes = model_config(tree).genes
    res = finetune(tree, genes, train, val, TrainConfig(lr=1e-3, epochs=2, patience=10, batch_size=4),
                   direction="bulk2st", lora=False)
    assert res.adapter is None
    assert res.tree.get("trf.0.q").tobytes() != tree.get("trf.0.q").tobytes()
    assert res.tree.get("norm.mu").tobytes() == tree.get("norm.mu").tobytes()


def test_unknown_direction(tiny_setup):
    tree, *_ = tiny_setup
    with pytest.raises(TransferError):
        prepare_transfer(tree, model_config(tree).genes, "st2st")
