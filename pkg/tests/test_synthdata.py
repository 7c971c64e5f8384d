import numpy as np
import pytest
from scipy import ndimage

from fiva.synthdata import (
    ClientSpec,
    ShapeWorldSpec,
    default_spec,
    generate_client_dataset,
    heterogeneity_profile,
    load_dataset,
    save_dataset,
)


def test_default_roster():
    spec = default_spec(0)
    assert [c.n_samples for c in spec.clients] == [600, 80, 30, 500, 30]
    assert [len(c.labels) for c in spec.clients] == [4, 1, 3, 2, 4]
    assert spec.holdout.n_samples == 100
    union = set().union(*(c.labels for c in spec.clients))
    assert union == set(spec.holdout.labels) == set(range(1, 7))


def test_invalid_specs():
    with pytest.raises(ValueError):
        ClientSpec("x", 10, (), 0.0, 0.02, 1)
    with pytest.raises(ValueError):
        ClientSpec("x", 10, (1,), 0.5, 0.02, 1)
    a = ClientSpec("a", 5, (1,), 0.0, 0.02, 1)
    with pytest.raises(ValueError):
        # label 2 covered by nobody
        ShapeWorldSpec((a,), ClientSpec("h", 5, (1, 2), 0.0, 0.02, 2), grid=32, n_foreground=2)


def test_determinism(small_world):
    a = generate_client_dataset(small_world, "a")
    b = generate_client_dataset(small_world, "a")
    assert a.images.tobytes() == b.images.tobytes() and a.visible.tobytes() == b.visible.tobytes()


def test_same_seed_different_subsets():
    c1 = ClientSpec("p", 12, (1, 2, 3), 0.0, 0.02, seed=5)
    c2 = ClientSpec("q", 12, (4, 5, 6), 0.0, 0.02, seed=5)
    h = ClientSpec("h", 4, tuple(range(1, 7)), 0.0, 0.02, seed=9)
    spec = ShapeWorldSpec((c1, c2), h)
    p, q = generate_client_dataset(spec, "p"), generate_client_dataset(spec, "q")
    assert np.array_equal(p.images, q.images) and np.array_equal(p.full, q.full)
    assert not np.array_equal(p.visible, q.visible)


def test_visible_is_background_masking():
    spec = default_spec(0)
    for cid in ("c1", "holdout"):
        ds = generate_client_dataset(spec, cid)
        changed = ds.visible != ds.full
        assert np.all(ds.visible[changed] == 0)
        assert np.all(np.isin(ds.visible, (0,) + ds.labels))
    hold = generate_client_dataset(spec, "holdout")
    assert np.array_equal(hold.visible, hold.full) and hold.provenance == "holdout"


def test_shapes_count_size_and_range():
    ds = generate_client_dataset(default_spec(0), "c2")
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    eight = np.ones((3, 3))
    for img in ds.full:
        n_shapes = 0
        for lab in range(1, 7):
            comps, k = ndimage.label(img == lab, structure=eight)
            n_shapes += k
            for j in range(1, k + 1):
                assert (comps == j).sum() >= 4
        assert 1 <= n_shapes <= 4


def test_profile_recount(small_world, small_data):
    prof = heterogeneity_profile(small_world)
    rows = {r["client"]: r for r in prof["clients"]}
    assert [rows[c.name]["samples"] for c in small_world.clients] == [c.n_samples for c in small_world.clients]
    for ds in small_data:
        recount = [0] * small_world.n_foreground
        for img in ds.visible:
            for lab in ds.labels:
                recount[lab - 1] += ndimage.label(img == lab, structure=np.ones((3, 3)))[1]
        assert rows[ds.name]["histogram"] == recount


def test_uniform_spec_identical_rows():
    cs = tuple(ClientSpec(f"u{i}", 8, (1, 2), 0.0, 0.02, seed=4) for i in range(3))
    spec = ShapeWorldSpec(cs, ClientSpec("h", 4, (1, 2), 0.0, 0.02, seed=1), n_foreground=2)
    rows = heterogeneity_profile(spec)["clients"][:3]
    assert all({k: v for k, v in r.items() if k != "client"} == {k: v for k, v in rows[0].items() if k != "client"}
               for r in rows)


def test_binary_roundtrip(tmp_path, small_data):
    ds = small_data[2]
    path = tmp_path / "c.bin"
    save_dataset(ds, path)
    back = load_dataset(path, name=ds.name)
    assert np.array_equal(back.full, ds.full) and np.array_equal(back.visible, ds.visible)
    assert back.labels == ds.labels
    np.testing.assert_allclose(back.images, ds.images, atol=1e-7)
    raw = path.read_bytes()
    assert raw[:8] == b"FIVADATA"
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTADATA" + raw[8:])
    with pytest.raises(ValueError):
        load_dataset(bad)
