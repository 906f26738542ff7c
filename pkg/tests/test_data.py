import numpy as np
import pytest

from ebp import data as D
from ebp.data import ShapeSpec


def test_two_sine_mode_means():
    assert np.allclose(D.two_sine_mean(0.25, np.array([0, 1])), [1.0, -1.0], atol=1e-15)
    assert np.allclose(D.two_sine_mean(0.0, np.array([0, 1])), 0.0, atol=0)


@pytest.mark.parametrize("mode", [0, 1])
def test_two_sine_fixed_index_statistics(mode):
    t, x, m = D.gen_two_sine(200_000, seed=mode, t=0.25)
    x = x[m == mode]
    target = 1.0 if mode == 0 else -1.0
    assert len(x) >= 10**5 - 2000
    assert abs(x.mean() - target) <= 3 * np.sqrt(0.1 / len(x))
    assert abs(x.var() - 0.1) <= 0.05 * 0.1


def test_two_sine_noise_std_override_and_purity():
    a = D.gen_two_sine(50, seed=3, noise_std=0.1)
    b = D.gen_two_sine(50, seed=3, noise_std=0.1)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    t, x, m = a
    assert np.all((t >= 0) & (t <= 1))
    assert np.max(np.abs(x - D.two_sine_mean(t, m))) < 0.6
    with pytest.raises(ValueError):
        D.gen_two_sine(0)


def test_two_sine_csv_round_trip(tmp_path):
    t, x, m = D.gen_two_sine(20, seed=1)
    p = tmp_path / "ts.csv"
    D.write_two_sine_csv(p, t, x, m)
    t2, x2, m2 = D.read_two_sine_csv(p)
    assert np.array_equal(t, t2) and np.array_equal(x, x2) and np.array_equal(m, m2)


@pytest.mark.parametrize("kind", D.SHAPES)
def test_shapes_lie_on_their_surface(kind):
    for scale in (0.5, 1.0, 2.0):
        p = D.gen_shape(ShapeSpec(kind, 500, scale, seed=7))
        assert p.shape == (500, 3)
        assert np.max(D.surface_residual(p, kind, scale)) <= 1e-9


def test_sphere_is_centered_and_deterministic():
    p = D.gen_shape(ShapeSpec("sphere", 100_000, 1.0, seed=0))
    se = p.std(axis=0) / np.sqrt(len(p))
    assert np.all(np.abs(p.mean(axis=0)) <= 3 * se)
    assert np.array_equal(D.gen_shape(ShapeSpec("sphere", 10, seed=4)),
                          D.gen_shape(ShapeSpec("sphere", 10, seed=4)))


def test_shape_validation():
    with pytest.raises(ValueError):
        ShapeSpec("sphere", 0)
    with pytest.raises(ValueError):
        ShapeSpec("cone", 10)


def test_shape_dataset_cycles_kinds():
    x, labels = D.shape_dataset(["sphere", "cube-surface"], 5, 16, seed=0)
    assert x.shape == (5, 16, 3)
    assert labels == ["sphere", "cube-surface", "sphere", "cube-surface", "sphere"]


def test_perturb_contract():
    x = D.gen_shape(ShapeSpec("sphere", 256, seed=0))
    out, mask = D.perturb(x, 0.25, 0.05, seed=1)
    assert out.shape == x.shape
    assert np.array_equal(out[~mask].view(np.uint64), x[~mask].view(np.uint64))
    assert np.all(out[mask] != x[mask])
    one, m1 = D.perturb(x, 0.0, 0.05, seed=1)
    assert m1.sum() == 1
    same, m0 = D.perturb(x, 0.25, 0.0, seed=1)
    assert np.array_equal(same, x) and np.array_equal(m0, mask)


def test_perturb_masked_fraction_on_spheres():
    x = D.gen_shape(ShapeSpec("sphere", 256, seed=0))
    fr = np.array([D.perturb(x, 0.25, 0.05, seed=s)[1].mean() for s in range(100)])
    assert 0.01 <= fr.mean() <= 0.30
    # anchor plus a spherical cap of area fraction r^2 / 4
    expected = (1 + 255 * 0.25**2 / 4) / 256
    assert abs(fr.mean() - expected) <= 4 * fr.std() / 10
    assert fr.min() > 0 and fr.max() <= 0.30


def test_point_set_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    p = rng.standard_normal((9, 3)) * 10.0 ** rng.integers(-300, 300, (9, 3))
    f = tmp_path / "a.pts"
    D.write_point_set(f, p)
    q = D.read_point_set(f)
    assert q.tobytes() == p.tobytes()
    D.write_point_set(tmp_path / "b.pts", q)
    assert (tmp_path / "b.pts").read_text() == f.read_text()


def test_point_set_header_and_comments(tmp_path):
    f = tmp_path / "c.pts"
    f.write_text("# cloud\n2 3\n0 0 0\n# mid\n1 2 3\n")
    assert np.array_equal(D.read_point_set(f), [[0, 0, 0], [1, 2, 3]])


@pytest.mark.parametrize("text,line,what", [
    ("2 3\n1 2 3\n4 5\n", 3, "expected 3 values"),
    ("2 3\n1 2 3\n4 x 6\n", 3, "non-numeric token 'x'"),
    ("two 3\n1 2 3\n", 1, "malformed header"),
    ("3 3\n1 2 3\n4 5 6\n", 4, "header says 3 rows"),
    ("", 1, "missing"),
    ("1 2\nnan 1\n", 2, "non-finite"),
])
def test_point_set_errors_name_the_line(tmp_path, text, line, what):
    f = tmp_path / "bad.pts"
    f.write_text(text)
    with pytest.raises(D.PointSetFormatError, match=what) as e:
        D.read_point_set(f)
    assert e.value.line == line


def test_point_set_directory(tmp_path):
    clouds = [np.full((2, 3), float(i)) for i in range(3)]
    D.write_point_sets(tmp_path / "d", clouds)
    back = D.read_point_sets(tmp_path / "d")
    assert all(np.array_equal(a, b) for a, b in zip(clouds, back))
    with pytest.raises(FileNotFoundError):
        D.read_point_sets(tmp_path)
