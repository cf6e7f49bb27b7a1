"""End-to-end checks of the smoe command-line tool.

Usage: python3 cli_smoke.py <path to smoe binary>
"""

import csv
import json
import os
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

BIN = None
ROOT = Path(__file__).resolve().parent.parent
CONFIG = ROOT / "configs" / "tiny.toml"


def smoe(*args, env=None):
    full_env = dict(os.environ)
    full_env.pop("SMOE_SEED", None)
    full_env.update(env or {})
    p = subprocess.run([BIN, *map(str, args)], capture_output=True, text=True, env=full_env)
    assert p.returncode in (0, 1, 2, 3), p.returncode
    return p


def rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class CliSmoke(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        p = smoe("train", "--config", CONFIG, "--set", "balance.mode=scratch", "--set", "balance.lambda=1e-4",
                 "--set", "train.steps=30", "--set", "train.eval_every=10", "--out", cls.dir / "trained", "--quiet")
        assert p.returncode == 0, p.stderr
        cls.trained = cls.dir / "trained" / "checkpoint.smoe"
        p = smoe("train", "--config", CONFIG, "--init-only", "--out", cls.dir / "init", "--quiet")
        assert p.returncode == 0, p.stderr
        cls.init = cls.dir / "init" / "checkpoint.smoe"

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def out(self, name):
        return self.dir / name

    def test_train_outputs(self):
        d = self.out("trained")
        for name in ("checkpoint.smoe", "metrics.jsonl", "train.manifest.json"):
            self.assertTrue((d / name).is_file(), name)
        records = [json.loads(line) for line in (d / "metrics.jsonl").read_text().splitlines()]
        self.assertEqual([r["step"] for r in records], [0, 10, 20])
        for r in records:
            self.assertEqual(set(r), {"step", "loss_base", "loss_aux", "lr", "cv_per_layer", "head_imbalance",
                                      "wall_ms"})
            self.assertGreater(r["loss_aux"], 0.0)
        m = json.loads((d / "train.manifest.json").read_text())
        self.assertEqual(m["command"], "train")
        self.assertEqual(m["config"]["balance"]["mode"], "scratch")
        self.assertEqual(len(m["inputs"]), 2)
        self.assertTrue(all(len(i["sha256"]) == 64 for i in m["inputs"]))
        self.assertTrue(m["tool_version"])

    def test_train_variants_and_errors(self):
        for v in ("sink", "gated"):
            p = smoe("train", "--config", CONFIG, "--set", f"variant={v}", "--set", "train.steps=2",
                     "--out", self.out(v), "--quiet")
            self.assertEqual(p.returncode, 0, p.stderr)
        self.assertEqual(smoe("train", "--config", CONFIG, "--set", "train.corpus=/no/such/file",
                              "--out", self.out("x")).returncode, 2)
        self.assertEqual(smoe("train", "--config", CONFIG, "--set", "no.such.key=1", "--out", self.out("x")).returncode, 2)
        self.assertEqual(smoe("train", "--config", self.out("missing.toml")).returncode, 2)
        p = smoe("train", "--config", CONFIG, "--set", "train.steps=5", "--set", "train.lr_peak=1e30",
                 "--out", self.out("nan"), "--quiet")
        self.assertEqual(p.returncode, 3)
        self.assertIn("step", p.stderr)

    def test_eval(self):
        p = smoe("eval", "--checkpoint", self.init, "--out", self.out("e"))
        self.assertEqual(p.returncode, 0, p.stderr)
        untrained = json.loads(p.stdout)
        self.assertEqual(list(untrained), ["bpb", "tokens", "bytes"])
        self.assertLess(abs(untrained["bpb"] - 8.0), 0.1)
        self.assertEqual(p.stdout, smoe("eval", "--checkpoint", self.init, "--out", self.out("e")).stdout)
        trained = json.loads(smoe("eval", "--checkpoint", self.trained, "--out", self.out("e")).stdout)
        self.assertLess(trained["bpb"], untrained["bpb"])
        self.assertTrue((self.out("e") / "eval.manifest.json").is_file())

    def test_eval_vocab_mismatch(self):
        p = smoe("train", "--config", CONFIG, "--set", "model.vocab_size=300", "--init-only",
                 "--out", self.out("v300"), "--quiet")
        self.assertEqual(p.returncode, 0, p.stderr)
        self.assertEqual(smoe("eval", "--checkpoint", self.out("v300") / "checkpoint.smoe").returncode, 2)

    def test_analyze(self):
        d = self.out("an")
        for kind in ("heads", "imbalance", "sink-ratio", "value-norms", "pca"):
            p = smoe("analyze", kind, "--checkpoint", self.trained, "--out", d, "--max-windows", "16")
            self.assertEqual(p.returncode, 0, p.stderr)
        heads = rows(d / "heads.csv")
        self.assertEqual(heads[0], ["layer", "head", "imp"])
        self.assertEqual(len(heads) - 1, 2 * 4)
        self.assertEqual([tuple(map(int, r[:2])) for r in heads[1:]], sorted((l, h) for l in range(2) for h in range(4)))
        imb = rows(d / "imbalance.csv")
        self.assertEqual(imb[0], ["layer", "cv"])
        per_layer = [float(r[1]) for r in imb[1:-1]]
        self.assertEqual(imb[-1][0], "overall")
        self.assertAlmostEqual(float(imb[-1][1]), sum(per_layer) / len(per_layer), delta=1e-9)
        alpha = rows(d / "sinkratio.csv")
        self.assertEqual(alpha[0], ["layer", "head", "alpha"])
        self.assertTrue(all(0.0 < float(r[2]) <= 1.0 for r in alpha[1:]))
        norms = rows(d / "valuenorms.csv")
        self.assertEqual(norms[0], ["layer", "head", "position", "l2"])
        self.assertEqual(len(norms) - 1, 2 * 4 * 128)
        keys = [tuple(map(int, r[:3])) for r in norms[1:]]
        self.assertEqual(keys, sorted(keys))
        for l in range(2):
            for h in range(4):
                pca = rows(d / f"pca_{l}_{h}.csv")
                self.assertEqual(pca[0], ["kind", "index", "pc1", "pc2"])
                self.assertEqual(len(pca) - 1, 256)
        gated = self.untrained("gated")
        self.assertEqual(smoe("analyze", "sink-ratio", "--checkpoint", gated, "--out", d).returncode, 2)
        self.assertEqual(smoe("analyze", "nonsense", "--checkpoint", self.trained).returncode, 2)

    def untrained(self, variant):
        d = self.out("init_" + variant)
        p = smoe("train", "--config", CONFIG, "--set", f"variant={variant}", "--init-only", "--out", d, "--quiet")
        self.assertEqual(p.returncode, 0, p.stderr)
        return d / "checkpoint.smoe"

    def test_verify(self):
        p = smoe("verify", "--cases", "1", "--out", self.out("v1"))
        self.assertEqual(p.returncode, 0, p.stdout)
        self.assertTrue(all(line.startswith("PASS") for line in p.stdout.splitlines()))
        p = smoe("verify", "--cases", "10", "--corrupt-sink", "--out", self.out("v2"))
        self.assertEqual(p.returncode, 1)
        replay = self.out("v2") / "verify_replay.json"
        self.assertTrue(replay.is_file())
        p = smoe("verify", "--replay", replay, "--out", self.out("v3"))
        self.assertEqual(p.returncode, 1)
        self.assertEqual(smoe("verify", "--cases", "0").returncode, 2)

    def test_verify_seed_from_env(self):
        smoe("verify", "--cases", "1", "--out", self.out("s1"), env={"SMOE_SEED": "77"})
        m = json.loads((self.out("s1") / "verify.manifest.json").read_text())
        self.assertEqual(m["config"]["seed"], 77)

    def test_zero_first_value(self):
        p = smoe("zero-first-value", "--checkpoint", self.trained, "--tau", "1.0", "--out", self.out("z"))
        self.assertEqual(p.returncode, 0, p.stderr)
        r = json.loads(p.stdout)
        self.assertEqual(list(r), ["bpb_none", "bpb_all", "bpb_selective", "heads_flagged"])
        self.assertEqual(r["heads_flagged"], 0)
        self.assertEqual(r["bpb_selective"], r["bpb_none"])
        sink = self.untrained("sink")
        self.assertEqual(smoe("zero-first-value", "--checkpoint", sink, "--out", self.out("z")).returncode, 2)

    def test_finetune(self):
        self.assertEqual(smoe("finetune", "--checkpoint", self.trained, "--m", "5", "--steps", "2",
                              "--out", self.out("f5")).returncode, 2)
        p = smoe("finetune", "--checkpoint", self.trained, "--m", "4", "--steps", "4",
                 "--set", "train.eval_every=1", "--out", self.out("f4"), "--quiet")
        self.assertEqual(p.returncode, 0, p.stderr)
        for line in (self.out("f4") / "metrics.jsonl").read_text().splitlines():
            self.assertEqual(json.loads(line)["loss_aux"], 0.0)
        p = smoe("finetune", "--checkpoint", self.trained, "--m", "1", "--steps", "6", "--out", self.out("f1"), "--quiet")
        self.assertEqual(p.returncode, 0, p.stderr)
        before = rows(self.out("f1") / "importance_before.csv")
        after = rows(self.out("f1") / "importance_after.csv")
        self.assertEqual(before[0], ["layer", "head", "imp", "shared"])
        self.assertEqual([r[3] for r in before], [r[3] for r in after])
        self.assertEqual(sum(r[3] == "1" for r in before[1:]), 2)
        summary = json.loads(p.stdout)
        self.assertEqual(summary["m"], 1)

    def test_rerun_reproduces_outputs(self):
        d = self.out("rr")
        p = smoe("train", "--config", CONFIG, "--set", "train.steps=12", "--set", "train.eval_every=4",
                 "--out", d, "--quiet")
        self.assertEqual(p.returncode, 0, p.stderr)
        first = {n: (d / n).read_bytes() for n in ("checkpoint.smoe", "metrics.jsonl")}
        self.assertEqual(smoe("rerun", d / "train.manifest.json").returncode, 0)
        for n, b in first.items():
            self.assertEqual((d / n).read_bytes(), b, n)


if __name__ == "__main__":
    BIN = sys.argv.pop(1)
    unittest.main(verbosity=2)
