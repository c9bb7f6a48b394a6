use pyo3::ffi::c_str;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::attach(|py| {
        let m = PyModule::new(py, "hive").unwrap();
        hive::hive(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("hive", m).unwrap();
        f(py, &globals);
    });
}

#[test]
fn free_functions() {
    with_module(|py, g| {
        py.run(
            c_str!(
                r#"
assert hive.select_layers(24, 12) == [(4, 2), (8, 4), (12, 6), (16, 8), (20, 10), (24, 12)]
assert hive.select_layers(8, 4, 0.25) == [(4, 2), (8, 4)]
assert hive.lr_at(0, 1e-3, 1e-5, 10, 100) == 0.0
assert hive.lr_at(10, 1e-3, 1e-5, 10, 100) == 1e-3
assert hive.lr_at(100, 1e-3, 1e-5, 10, 100) == 1e-5
f = hive.analytic_flops(32, 6, 576, 64, 4096)
assert f["cross_attn"] < f["self_attn"]
s = hive.gen_synthetic(3, 1, 8, 8)
assert len(s) == 3 and len(s[0].pixels) == 8 * 8 * 3 and s[0].shape == (8, 8, 3)
try:
    hive.select_layers(4, 8, 0.0)
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#
            ),
            Some(g),
            None,
        )
        .unwrap();
    });
}

#[test]
fn model_handle() {
    let dir = tempfile::tempdir().unwrap();
    with_module(|py, g| {
        g.set_item("ckpt", dir.path().to_str().unwrap()).unwrap();
        py.run(
            c_str!(
                r#"
cfg = "encoder.image_h = 8\nencoder.image_w = 8\nencoder.d_v = 16\nencoder.depth = 4\nlm.d_l = 16\nlm.depth = 2\nlm.max_seq = 16"
m = hive.Model(cfg, seed=1)
assert m.mode == "hierarchical" and m.pairs == [(4, 2)]
s = hive.gen_synthetic(1, 2, 8, 8)[0]
ids = [1] + m.encode(s.caption)
plain = m.logits(s.pixels, s.shape, ids, "plain")
assert m.logits(s.pixels, s.shape, ids) == plain
m.set_gates(0.5)
assert m.logits(s.pixels, s.shape, ids) != plain
assert len(plain) == len(ids) and len(plain[0]) == m.vocab_size
macs = m.measured_flops(s.pixels, s.shape, ids)
assert macs["xattn"] > 0 and "qk" in macs
import json
rep = json.loads(m.flop_report(4))
assert rep["measured"] == rep["closed_form"]
assert isinstance(m.caption(s.pixels, s.shape), str)
sa = m.to_concat()
assert sa.mode == "concat" and len(sa.logits(s.pixels, s.shape, ids)) == len(ids)
m.save(ckpt)
back = hive.Model.load(ckpt)
assert back.logits(s.pixels, s.shape, ids) == m.logits(s.pixels, s.shape, ids)
assert back.num_params() == m.num_params() and m.num_params("projector") > 0
"#
            ),
            Some(g),
            None,
        )
        .unwrap();
    });
}

#[test]
fn cli_exit_codes() {
    with_module(|py, g| {
        py.run(c_str!("assert hive.run_cli(['no-such-command']) == 2"), Some(g), None)
            .unwrap();
    });
}
