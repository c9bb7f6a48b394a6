"""Smoke test of the Python extension.

Build it first:

    cargo build --release -p hive-py --features extension-module
    python3 python/smoke.py

The shared library is looked up at $HIVE_LIB, else target/release/libhive.so.
"""

import importlib.util
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_hive():
    lib = Path(os.environ.get("HIVE_LIB", ROOT / "target" / "release" / "libhive.so"))
    if not lib.exists():
        sys.exit(f"extension not found at {lib}; build it with the command in this file's docstring")
    tmp = Path(tempfile.mkdtemp())
    target = tmp / "hive.so"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("hive", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    hive = load_hive()

    print("layer pairs (24, 12):", hive.select_layers(24, 12))
    print("lr at 0 / warmup / total:", [hive.lr_at(i, 1e-3, 1e-5, 10, 100) for i in (0, 10, 100)])
    f = hive.analytic_flops(32, 6, 576, 64, 4096)
    print(f"analytic cross/self ratio at N_v=576: {f['cross_attn'] / f['self_attn']:.3f}")

    cfg = "encoder.depth = 4\nencoder.d_v = 16\nlm.d_l = 16\nlm.depth = 2\nlm.max_seq = 16"
    model = hive.Model(cfg, seed=0)
    print(model)
    sample = hive.gen_synthetic(1, 0)[0]
    print(sample)
    ids = [1] + model.encode(sample.caption)
    logits = model.logits(sample.pixels, sample.shape, ids)
    assert len(logits) == len(ids) and len(logits[0]) == model.vocab_size

    report = json.loads(model.flop_report(8))
    assert report["measured"] == report["closed_form"]
    sa = json.loads(model.to_concat().flop_report(8))
    print(f"MACs hierarchical {report['measured_total']:,} vs concat baseline {sa['measured_total']:,}")

    print("untrained caption:", repr(model.caption(sample.pixels, sample.shape)))
    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        back = hive.Model.load(d)
        assert back.logits(sample.pixels, sample.shape, ids) == logits
    assert hive.run_cli(["--version"]) == 0
    print("ok")


if __name__ == "__main__":
    main()
