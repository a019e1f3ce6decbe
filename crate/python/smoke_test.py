"""Smoke test for the pybectra extension module.

Build first:

    cargo build -p bectra-py --features extension-module

then run `python3 python/smoke_test.py`. Set PYBECTRA_LIB to point at a
specific shared library.
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def find_library() -> Path:
    env = os.environ.get("PYBECTRA_LIB")
    if env:
        return Path(env)
    for profile in ("release", "debug"):
        for name in ("libpybectra.so", "libpybectra.dylib", "pybectra.dll"):
            p = ROOT / "target" / profile / name
            if p.exists():
                return p
    sys.exit("pybectra library not found; build it with cargo first")


def load(lib: Path, tmp: Path):
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    target = tmp / f"pybectra{suffix}"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("pybectra", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        pb = load(find_library(), tmp)

        # One frame, target "0": only the path [0] emits it.
        lp = [[math.log(0.6), math.log(0.4)]]
        nll, grad, ok = pb.ctc_loss(lp, [0])
        assert ok and abs(nll + math.log(0.6)) < 1e-12, nll
        assert len(grad) == 1 and len(grad[0]) == 2

        nll, _, ok = pb.ctc_loss(lp, [0, 0])
        assert not ok and math.isinf(nll)

        # Uniform two-class lattice, T=2, empty target: blank twice.
        half = math.log(0.5)
        assert abs(pb.transducer_loss([[[half, half]], [[half, half]]], []) - 2 * math.log(2)) < 1e-12

        c = pb.word_errors("a x c", "a b c")
        assert c["substitutions"] == 1 and c["distance"] == 1

        assert pb.mask_count(10, 1, 10) == 9
        assert pb.mask_count(10, 10, 10) == 0

        assert pb.cli(["bectra", "no-such-command"]) == 1

        out = tmp / "run"
        cfg = tmp / "tiny.toml"
        cfg.write_text(
            "seed = 3\n"
            "[data]\ntrain = 16\ndev = 4\ntest = 2\nlm_sentences = 60\n"
            "[vocab]\nasr_units = 30\n"
            "[model]\nd_model = 16\nheads = 2\nff_dim = 32\n"
            "enc_layers = 1\nconcat_layers = 1\nmlm_layers = 1\n"
            "[pretrain]\nsteps = 5\nbatch = 4\nheldout = 10\n"
            "[train]\nepochs = 1\nbatch_size = 8\nwarmup = 5\naverage_top = 1\n"
        )
        for cmd in ("gen-data", "build-vocab", "pretrain-mlm", "train"):
            code = pb.cli(["bectra", "--config", str(cfg), "--out-dir", str(out), cmd])
            assert code == 0, (cmd, code)

        rec = pb.Recognizer(str(out))
        assert rec.num_parameters > 0
        feats = [[0.0] * 16 for _ in range(20)]
        text, trace = rec.decode(feats, iterations=3, beam=2)
        assert isinstance(text, str)
        assert [k for k, _, _ in trace] == [1, 2, 3]
        assert not any(trace[-1][2])

    print("pybectra smoke test passed")


if __name__ == "__main__":
    main()
