import os
import struct

import numpy as np
import pytest

from ebp import checkpoint as ckpt
from ebp import cli
from ebp import trainer as T
from ebp.data import read_point_set, read_point_sets, write_point_set, gen_shape, ShapeSpec

SMALL = ["--set", "theta_dim=4", "--set", "energy_hidden=16", "--set", "encoder_hidden=16",
         "--set", "sampler_hidden=16", "--set", "sampler_state=8", "--set", "block_size=8",
         "--batch-size", "4", "--steps", "3"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def small_state(**kw):
    cfg = T.TrainConfig(batch_size=4, steps=3, theta_dim=4, energy_hidden=(16,),
                        encoder_hidden=(16,), sampler_hidden=(16,), sampler_state=8,
                        block_size=8, lr=1e-3, **kw)
    return T.build_state(cfg, 1)


def toy_sets(count=8, n=10):
    rng = np.random.default_rng(0)
    return rng.choice([-1.0, 1.0], (count, n, 1)) + 0.2 * rng.standard_normal((count, n, 1))


@pytest.fixture
def shapes_dir(tmp_path):
    d = tmp_path / "shapes"
    assert cli.main(["gen-data", "shape", "--count", "6", "--n", "32", "--kinds",
                     "sphere,cube-surface", "--out", str(d), "--seed", "1"]) == 0
    return d


# -- checkpoint format ----------------------------------------------------
def test_round_trip_is_bitwise(tmp_path):
    state = small_state()
    T.train(toy_sets(), state=state, iters=3)
    a, b = tmp_path / "a.ebp", tmp_path / "b.ebp"
    T.save_state(a, state)
    back = T.load_state(a)
    T.save_state(b, back)
    assert a.read_bytes() == b.read_bytes()
    ta, tb = state.tensors(), back.tensors()
    assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)
    assert back.step == 3


def test_resume_reproduces_the_loss_trajectory(tmp_path):
    state = small_state(mode="hamiltonian")
    data = toy_sets()
    T.train(data, state=state, iters=5)
    path = tmp_path / "mid.ebp"
    T.save_state(path, state)
    T.train(data, state=state, iters=10)
    resumed = T.train(data, state=T.load_state(path), iters=10)
    assert [r.row() for r in state.history[5:]] == [r.row() for r in resumed.history]


def test_zero_dim_tensors_keep_their_shape(tmp_path):
    p = tmp_path / "z.ebp"
    ckpt.save(p, {"s": np.array(2.5), "v": np.arange(3.0)}, {"k": 1})
    t, h = ckpt.load(p)
    assert t["s"].shape == () and t["s"] == 2.5 and h == {"k": 1}


def test_unknown_tensor_name_is_rejected(tmp_path):
    state = small_state()
    tensors = state.tensors()
    tensors["model.extra"] = np.zeros(2)
    with pytest.raises(KeyError, match="model.extra"):
        state.load_tensors(tensors)
    p = tmp_path / "x.ebp"
    T.save_state(p, state)
    t, h = ckpt.load(p)
    t["sampler.bogus"] = np.ones(1)
    ckpt.save(p, t, h)
    with pytest.raises(ckpt.CheckpointError, match="sampler.bogus"):
        T.load_state(p)


def test_corrupt_files_are_rejected(tmp_path):
    p = tmp_path / "c.ebp"
    T.save_state(p, small_state())
    raw = p.read_bytes()
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 2) + raw[8:],
        "truncated": raw[:-5],
        "trailing": raw + b"\0",
    }
    for name, blob in cases.items():
        q = tmp_path / f"{name}.ebp"
        q.write_bytes(blob)
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load(q)


def test_rng_state_round_trip():
    rng = np.random.Generator(np.random.Philox(7))
    rng.standard_normal(5)
    back = ckpt.restore_rng(ckpt.rng_state(rng))
    assert np.array_equal(rng.standard_normal(4), back.standard_normal(4))


# -- command line ---------------------------------------------------------
def test_train_zero_iterations_matches_init(tmp_path, capsys, shapes_dir):
    init = tmp_path / "init.ebp"
    assert run(capsys, "init", "unconditional", "--x-dim", 3, "--out", init, "--seed", 3,
               *SMALL)[0] == 0
    out = tmp_path / "run"
    assert run(capsys, "train", "unconditional", "--data", shapes_dir, "--out-dir", out,
               "--iters", 0, "--seed", 3, *SMALL)[0] == 0
    assert (out / "final.ebp").read_bytes() == init.read_bytes()


def test_train_writes_history_and_checkpoints_and_resumes(tmp_path, capsys, shapes_dir):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "unconditional", "--data", shapes_dir, "--out-dir", out,
                     "--iters", 4, "--checkpoint-every", 2, "--seed", 0, *SMALL)
    assert code == 0
    assert sorted(os.listdir(out)) == ["config.json", "final.ebp", "loss.csv",
                                       "step_0000002.ebp", "step_0000004.ebp"]
    rows = (out / "loss.csv").read_text().splitlines()
    assert rows[0].startswith("step,total,data_term") and len(rows) == 5
    # resuming from step 2 for 2 steps reproduces steps 3 and 4
    out2 = tmp_path / "resumed"
    assert run(capsys, "train", "unconditional", "--data", shapes_dir, "--out-dir", out2,
               "--resume", out / "step_0000002.ebp", "--iters", 2, *SMALL)[0] == 0
    assert (out2 / "loss.csv").read_text().splitlines()[1:] == rows[3:]
    assert (out2 / "final.ebp").read_bytes() == (out / "final.ebp").read_bytes()


def test_config_file_and_overrides(tmp_path, capsys, shapes_dir):
    conf = tmp_path / "c.conf"
    conf.write_text("# desk run\nlr = 0.002\nbatch_size = 2   # small\nmode = hamiltonian\n")
    out = tmp_path / "run"
    assert run(capsys, "train", "unconditional", "--data", shapes_dir, "--out-dir", out,
               "--config", conf, "--iters", 1, *SMALL)[0] == 0
    import json
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["lr"] == 0.002 and cfg["batch_size"] == 4 and cfg["mode"] == "hamiltonian"
    conf.write_text("bogus = 1\n")
    code, _, err = run(capsys, "train", "unconditional", "--data", shapes_dir, "--out-dir", out,
                       "--config", conf)
    assert code == 2 and err.startswith("EBPERR:") and "bogus" in err


def test_exit_codes(tmp_path, capsys):
    code, _, err = run(capsys, "sample", "--nope")
    assert code == 1 and err.startswith("EBPERR:") and err.count("\n") == 1
    code, _, err = run(capsys, "sample", "--ckpt", tmp_path / "missing.ebp", "--out-dir", tmp_path)
    assert code == 2 and err.startswith("EBPERR:")
    bad = tmp_path / "v.ebp"
    T.save_state(bad, small_state())
    raw = bad.read_bytes()
    bad.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    code, _, err = run(capsys, "sample", "--ckpt", bad, "--out-dir", tmp_path)
    assert code == 2 and "version" in err
    code, _, err = run(capsys, "heatmap", "--ckpt", bad, "--t-grid", "nonsense")
    assert code in (1, 2) and err.startswith("EBPERR:")
    code, out, err = run(capsys, "oracle-check", "gp", "--samples", 30)
    assert code == 3 and ",FAIL" in out and err.startswith("EBPERR: numerical")


def test_oracle_check_gp(capsys):
    code, out, _ = run(capsys, "oracle-check", "gp", "--samples", 100_000)
    assert code == 0
    line = out.splitlines()[1].split(",")
    assert line[0] == "gp_cov_gap" and float(line[1]) <= 0.05 and line[3] == "PASS"


def test_eval_gen_identity(capsys, shapes_dir, tmp_path):
    csv_out = tmp_path / "r.csv"
    code, out, _ = run(capsys, "eval-gen", "--gen-dir", shapes_dir, "--ref-dir", shapes_dir,
                       "--out", csv_out)
    assert code == 0
    vals = dict(line.split(",") for line in csv_out.read_text().splitlines()[1:])
    assert {k: float(v) for k, v in vals.items()} == {
        "jsd": 0.0, "mmd_cd": 0.0, "cov_cd": 1.0, "mmd_emd": 0.0, "cov_emd": 1.0}
    assert "COV-CD (%)" in out and "100.0000" in out


def test_seeded_commands_are_reproducible(tmp_path, capsys, monkeypatch):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(capsys, "gen-data", "two-sine", "--count", 50, "--out", a, "--seed", 4)[0] == 0
    monkeypatch.setenv("EBP_SEED", "4")
    assert run(capsys, "gen-data", "two-sine", "--count", 50, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    monkeypatch.setenv("EBP_SEED", "x")
    assert run(capsys, "gen-data", "two-sine", "--count", 5, "--out", b)[0] == 1


def test_sample_and_denoise(tmp_path, capsys):
    init = tmp_path / "m.ebp"
    assert run(capsys, "init", "unconditional", "--x-dim", 3, "--out", init, *SMALL)[0] == 0
    outs = []
    for k in range(2):
        d = tmp_path / f"s{k}"
        assert run(capsys, "sample", "--ckpt", init, "--n", 16, "--count", 3, "--out-dir", d,
                   "--seed", 2)[0] == 0
        outs.append([p.tobytes() for p in read_point_sets(d)])
    assert outs[0] == outs[1] and len(outs[0]) == 3
    clean = tmp_path / "clean.pts"
    write_point_set(clean, gen_shape(ShapeSpec("sphere", 64, seed=0)))
    code, out, _ = run(capsys, "denoise", "--ckpt", init, "--input", clean, "--out-dir",
                       tmp_path / "dn", "--seed", 1)
    assert code == 0
    masked, before, after = out.splitlines()[1].split(",")
    mask = np.loadtxt(tmp_path / "dn" / "mask.txt").astype(bool)
    assert int(masked) == mask.sum() > 0
    noisy = read_point_set(tmp_path / "dn" / "perturbed.pts")
    den = read_point_set(tmp_path / "dn" / "denoised.pts")
    assert den[~mask].tobytes() == noisy[~mask].tobytes()


def test_conditional_train_and_heatmap(tmp_path, capsys):
    data = tmp_path / "ts.csv"
    assert run(capsys, "gen-data", "two-sine", "--count", 64, "--out", data)[0] == 0
    out = tmp_path / "run"
    assert run(capsys, "train", "conditional", "--data", data, "--out-dir", out, "--iters", 2,
               "--task-size", 16, *SMALL)[0] == 0
    ctx = tmp_path / "ctx.csv"
    ctx.write_text("t,x\n0.1,0.5\n0.3,-0.9\n")
    hm = tmp_path / "h.csv"
    assert run(capsys, "heatmap", "--ckpt", out / "final.ebp", "--context", ctx,
               "--t-grid", "0:1:3", "--x-grid=-2:2:5", "--out", hm)[0] == 0
    rows = [r.split(",") for r in hm.read_text().splitlines()]
    assert len(rows) == 4 and all(len(r) == 6 for r in rows)
    dens = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.allclose(dens.sum(axis=1), 1.0)
    code, _, err = run(capsys, "sample", "--ckpt", out / "final.ebp", "--out-dir", tmp_path)
    assert code == 2 and "unconditional" in err
