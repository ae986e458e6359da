import numpy as np
import pytest

from prunekit.importance import (
    accumulate_element_importance,
    aggregate_attention,
    aggregate_ffn,
    aggregate_in_out,
    answer_ce_loss,
    compute_report,
    write_report,
)
from prunekit.model import ModelConfig, expected_shapes, init_model
from prunekit.taskgen import build_dataset, default_task_specs
from prunekit.tensor import ComputeGraph, ContractError, Tensor, mul, sub, sum_all
from reference import reference_answer_ce

CFG = ModelConfig(vocab_size=512, max_seq_len=16, d_model=20,
                  n_blocks=2, n_heads=2, d_head=5, d_ffn=28)
SPECS = default_task_specs(7)


def random_elem(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return {
        name: rng.random(shape).astype(np.float32)
        for name, shape in expected_shapes(cfg).items()
    }


# ---------------------------------------------------------------------------
# element scores


def test_single_parameter_hand_case():
    # L = (theta * x - y)^2 at theta=2, x=1, y=0: grad = 2*(2) = 4, score 8
    theta = Tensor([2.0])
    with ComputeGraph() as g:
        pred = mul(theta, 1.0)
        err = sub(pred, 0.0)
        loss = sum_all(mul(err, err))
    g.backward(loss)
    score = np.abs(theta.grad) * np.abs(theta.data)
    assert np.allclose(score, [8.0])


def test_unused_parameter_scores_zero():
    model = init_model(CFG, seed=1)
    ds = build_dataset(SPECS, np.arange(64), seed=3)
    # cut block 1 off from the loss: zero its residual write-backs
    model.params["blocks.1.attn.wo"].data[:] = 0.0
    model.params["blocks.1.ffn.w_out"].data[:] = 0.0
    elem = accumulate_element_importance(model, ds, batch_size=32)
    # with its outputs severed, the FFN input weights of block 1 cannot
    # affect the loss; their importance must be exactly zero
    assert np.array_equal(
        elem["blocks.1.ffn.w_in"], np.zeros_like(elem["blocks.1.ffn.w_in"])
    )


def test_gradients_summed_over_batches_before_product():
    model = init_model(CFG, seed=2)
    ds = build_dataset(SPECS, np.arange(64), seed=4)
    one_shot = accumulate_element_importance(model, ds, batch_size=64)
    batched = accumulate_element_importance(model, ds, batch_size=16)
    # per-batch mean losses: summed gradients across 4 quarter-batches equal
    # 4x the full-batch gradient of the same mean only if batch sizes match;
    # instead check the defining identity directly: recompute by hand
    model.zero_grads()
    for start in (0, 16, 32, 48):
        with ComputeGraph() as g:
            loss = answer_ce_loss(model, ds, np.arange(start, start + 16))
        g.backward(loss)
    name = "blocks.0.ffn.w_in"
    expected = np.abs(model.params[name].grad) * np.abs(model.params[name].data)
    assert np.array_equal(batched[name], expected)
    assert one_shot[name].shape == batched[name].shape


def test_empty_dataset_rejected():
    model = init_model(CFG, seed=1)
    ds = build_dataset(SPECS, np.arange(8), seed=3).subset(np.array([], dtype=int))
    with pytest.raises(ContractError):
        accumulate_element_importance(model, ds)


def test_importance_matches_perturbation_oracle():
    """First-order validity: |L(theta*(1-eps)) - L(theta)| ~ eps * score."""
    model = init_model(CFG, seed=5)
    ds = build_dataset(SPECS, np.arange(64), seed=6)
    elem = accumulate_element_importance(model, ds, batch_size=64)
    inputs, targets, weights = ds.training_arrays()
    base = reference_answer_ce(model, inputs, targets, weights)
    eps = 1e-3
    rng = np.random.default_rng(0)
    names = [n for n in sorted(elem) if model.params[n].size > 4]
    for name in rng.choice(names, size=8, replace=False):
        p = model.params[name]
        # probe a coordinate with meaningful first-order mass
        idx = np.unravel_index(int(np.argmax(elem[name])), p.shape)
        orig = p.data[idx]
        p.data[idx] = orig * (1.0 - eps)
        perturbed = reference_answer_ce(model, inputs, targets, weights)
        p.data[idx] = orig
        observed = abs(perturbed - base)
        predicted = eps * float(elem[name][idx])
        assert abs(observed - predicted) <= 0.05 * predicted + 1e-6, (
            f"{name}{idx}: observed {observed}, predicted {predicted}"
        )


# ---------------------------------------------------------------------------
# aggregation oracles


def test_aggregate_ffn_counting_and_zero():
    elem = {name: np.ones(shape, dtype=np.float32)
            for name, shape in expected_shapes(CFG).items()}
    vec = aggregate_ffn(elem, 0)
    assert np.array_equal(vec, np.full(CFG.d_ffn, 2 * CFG.d_model, dtype=np.float64))
    elem["blocks.0.ffn.w_in"][3, :] = 0
    elem["blocks.0.ffn.w_out"][:, 3] = 0
    assert aggregate_ffn(elem, 0)[3] == 0.0


def test_aggregate_ffn_matches_loop_oracle():
    elem = random_elem(CFG, seed=11)
    vec = aggregate_ffn(elem, 1)
    w_in = elem["blocks.1.ffn.w_in"]
    w_out = elem["blocks.1.ffn.w_out"]
    for n in range(CFG.d_ffn):
        row = np.ascontiguousarray(w_in[n, :], dtype=np.float64).sum()
        col = np.ascontiguousarray(w_out[:, n], dtype=np.float64).sum()
        assert vec[n] == row + col  # bit-for-bit, fixed summation order


def test_aggregate_attention_counting_and_zero():
    elem = {name: np.ones(shape, dtype=np.float32)
            for name, shape in expected_shapes(CFG).items()}
    vec = aggregate_attention(elem, 0)
    expected = CFG.n_heads * (3 * CFG.d_model + CFG.d_model)
    assert np.array_equal(vec, np.full(CFG.d_head, expected, dtype=np.float64))
    for nm in ("wq", "wk", "wv"):
        elem[f"blocks.0.attn.{nm}"][:, :, 2] = 0
    elem["blocks.0.attn.wo"][:, 2, :] = 0
    assert aggregate_attention(elem, 0)[2] == 0.0


def test_aggregate_attention_matches_loop_oracle():
    elem = random_elem(CFG, seed=12)
    vec = aggregate_attention(elem, 0)
    pre = "blocks.0.attn."
    for n in range(CFG.d_head):
        total = np.float64(0.0)
        for nm in ("wq", "wk", "wv"):
            per_head = np.array([
                np.ascontiguousarray(elem[pre + nm][h, :, n], dtype=np.float64).sum()
                for h in range(CFG.n_heads)
            ])
            total = total + per_head.sum()
        per_head = np.array([
            np.ascontiguousarray(elem[pre + "wo"][h, n, :], dtype=np.float64).sum()
            for h in range(CFG.n_heads)
        ])
        total = total + per_head.sum()
        assert vec[n] == total


def test_aggregate_in_out_symmetry_and_zero():
    elem = {name: np.ones(shape, dtype=np.float32)
            for name, shape in expected_shapes(CFG).items()}
    vec = aggregate_in_out(elem)
    per_dim = (
        CFG.vocab_size + CFG.max_seq_len + CFG.vocab_size + 2
        + CFG.n_blocks * (4 + 4 * CFG.n_heads * CFG.d_head + 2 * CFG.d_ffn)
    )
    assert np.array_equal(vec, np.full(CFG.d_model, per_dim, dtype=np.float64))


def test_aggregate_in_out_matches_loop_oracle():
    elem = random_elem(CFG, seed=13)
    vec = aggregate_in_out(elem)
    for n in range(0, CFG.d_model, 3):
        total = np.ascontiguousarray(elem["tok_emb"][:, n], dtype=np.float64).sum()
        total = total + np.ascontiguousarray(elem["pos_emb"][:, n], dtype=np.float64).sum()
        total = total + np.float64(elem["final_norm.scale"][n])
        total = total + np.float64(elem["final_norm.shift"][n])
        total = total + np.ascontiguousarray(elem["head"][:, n], dtype=np.float64).sum()
        for b in range(CFG.n_blocks):
            pre = f"blocks.{b}."
            for ln in ("ln1", "ln2"):
                total = total + np.float64(elem[pre + ln + ".scale"][n])
                total = total + np.float64(elem[pre + ln + ".shift"][n])
            for nm in ("wq", "wk", "wv"):
                per_head = np.array([
                    np.ascontiguousarray(elem[pre + "attn." + nm][h, n, :], np.float64).sum()
                    for h in range(CFG.n_heads)
                ])
                total = total + per_head.sum()
            per_head = np.array([
                np.ascontiguousarray(elem[pre + "attn.wo"][h, :, n], np.float64).sum()
                for h in range(CFG.n_heads)
            ])
            total = total + per_head.sum()
            total = total + np.ascontiguousarray(elem[pre + "ffn.w_in"][:, n], np.float64).sum()
            total = total + np.ascontiguousarray(elem[pre + "ffn.w_out"][n, :], np.float64).sum()
        assert vec[n] == total  # bit-for-bit, fixed summation order


def test_block_out_of_range():
    elem = random_elem(CFG)
    with pytest.raises(ContractError):
        aggregate_ffn(elem, 5)
    with pytest.raises(ContractError):
        aggregate_attention(elem, 5)


# ---------------------------------------------------------------------------
# invariants


def test_scores_nonnegative_and_scale_consistent():
    model = init_model(CFG, seed=7)
    ds = build_dataset(SPECS, np.arange(64), seed=8)
    elem = accumulate_element_importance(model, ds, batch_size=32)

    def scaled_loss(m, d, rows):
        return mul(answer_ce_loss(m, d, rows), 3.0)

    elem3 = accumulate_element_importance(model, ds, batch_size=32, loss_fn=scaled_loss)
    report = compute_report(model, elem)
    report3 = compute_report(model, elem3)
    for vec, vec3 in zip(
        report.ffn_inter + report.att_inter + [report.in_out],
        report3.ffn_inter + report3.att_inter + [report3.in_out],
    ):
        assert (vec >= 0).all()
        nonzero = vec > 0
        assert np.allclose(vec3[nonzero] / vec[nonzero], 3.0, rtol=1e-4)
        assert np.array_equal(np.argsort(vec, kind="stable"),
                              np.argsort(vec3, kind="stable"))


def test_report_file_roundtrip(tmp_path):
    model = init_model(CFG, seed=7)
    elem = random_elem(CFG, seed=20)
    report = compute_report(model, elem)
    path = tmp_path / "imp.tsv"
    write_report(report, path)
    lines = path.read_text().splitlines()
    kinds = {line.split("\t")[0] for line in lines}
    assert kinds == {"ffn_inter", "att_inter", "in_out", "block_scores"}
    first = lines[0].split("\t")
    assert first[0] == "ffn_inter" and first[1] == "0"
    assert len(first[2].split()) == CFG.d_ffn
