import numpy as np
import pytest

from btd.errors import ConfigError, InputError
from btd.tamper import (Box, FingerprintSpec, TamperRecipe, directional_kernel, feather_alpha, fingerprint_noise,
                        foreign_fingerprint, harmonic_fill, host_fingerprint, inject_tamper, make_corpus,
                        remove_tamper, render_benign, render_content, synth_benign, with_partial_swap)


def kernel_lag1(k):
    """Oracle: horizontal lag-1 autocorrelation of white noise filtered by unit-energy ``k``."""
    k = np.asarray(k, dtype=float)
    return float(np.sum(k[:, 1:] * k[:, :-1]) / np.sum(k**2))


def lag1(noise):
    noise = noise - noise.mean(axis=(-2, -1), keepdims=True)
    return float(np.mean(noise[..., :, 1:] * noise[..., :, :-1]) / np.mean(noise**2))


def test_kernel_unit_energy():
    for f in (0.3, 0.6, 1.0):
        assert np.sum(directional_kernel(3, "horizontal", f) ** 2) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        FingerprintSpec("x", np.zeros((2, 2)))


def test_host_noise_autocorrelation():
    spec = host_fingerprint()
    rngs = [np.random.default_rng(i) for i in range(1000)]
    noise = np.stack([render_benign(spec, 64, r)[1] for r in rngs])
    expected = kernel_lag1(spec.correlation_kernel)
    assert lag1(noise) == pytest.approx(expected, rel=0.10)
    assert noise.std() == pytest.approx(spec.noise_sigma, rel=0.10)
    # vertical neighbours are independent for a horizontal kernel
    assert abs(np.mean(noise[:, 1:] * noise[:, :-1]) / np.mean(noise**2)) < 0.02


def test_injected_region_carries_foreign_noise():
    foreign = foreign_fingerprint("inject")
    box = Box.centered(64, 32)
    recipe = TamperRecipe("Inject", box, 3, foreign)
    inside = box.as_mask((64, 64))
    residuals = []
    for i in range(500):
        rng = np.random.default_rng(10_000 + i)
        host, _ = render_benign(host_fingerprint(), 64, rng)
        content = render_content(foreign.background_texture, 64, rng, tumor=True)
        noise = fingerprint_noise(foreign, (64, 64), rng)
        out = inject_tamper(host.astype(np.float32), recipe, donor_patch=content + noise)
        residuals.append((out.astype(np.float64) - content)[inside].reshape(32, 32))
    got = lag1(np.stack(residuals))
    assert got == pytest.approx(kernel_lag1(foreign.correlation_kernel), rel=0.15)
    assert got < kernel_lag1(host_fingerprint().correlation_kernel)


def test_inject_locality_and_synthesized_donor():
    x = synth_benign(host_fingerprint(), 1, seed=0)[0]
    box = Box(10, 12, 20, 24)
    out = inject_tamper(x, TamperRecipe("Inject", box, 3, foreign_fingerprint()), seed=4)
    touched = feather_alpha(box.as_mask(x.shape), 3) > 0
    assert np.array_equal(out[~touched], x[~touched])
    assert not np.array_equal(out[box.as_mask(x.shape)], x[box.as_mask(x.shape)])
    assert out.dtype == x.dtype


def test_feather_ramp():
    m = Box(5, 5, 4, 4).as_mask((14, 14))
    a = feather_alpha(m, 2)
    assert a[6, 6] == 1.0
    assert a[6, 9] == pytest.approx(2 / 3) and a[6, 10] == pytest.approx(1 / 3) and a[6, 11] == 0.0


def test_harmonic_fill_reproduces_linear_field():
    yy, xx = np.mgrid[0:40, 0:40]
    field = 0.2 + 0.01 * yy - 0.005 * xx
    mask = Box(8, 10, 20, 15).as_mask(field.shape)
    damaged = field.copy()
    damaged[mask] = 0.0
    assert np.abs(harmonic_fill(damaged, mask) - field).max() <= 1e-3


def test_remove_is_local_and_continuous():
    rng = np.random.default_rng(0)
    content = render_content(host_fingerprint().background_texture, 64, rng, tumor=True)
    box = Box.centered(64, 32)
    out = remove_tamper(content, TamperRecipe("Remove", box, 0, None))
    mask = box.as_mask(content.shape)
    assert np.array_equal(out[~mask], content[~mask])
    # across the mask edge the fill joins its surroundings without a step
    edge_jump = np.abs(out[box.top:box.top + box.height, box.left] - out[box.top:box.top + box.height, box.left - 1])
    assert edge_jump.max() < 0.02
    # the lesion is gone: the fill is flatter than the original
    assert out[mask].std() < content[mask].std()


def test_recipe_validation():
    with pytest.raises(ConfigError):
        TamperRecipe("Smudge", Box(0, 0, 1, 1))
    with pytest.raises(InputError):
        inject_tamper(np.zeros((16, 16)), TamperRecipe("Inject", Box(10, 10, 8, 8), 0, foreign_fingerprint()))
    with pytest.raises(InputError):
        remove_tamper(np.zeros((16, 16)), TamperRecipe("Inject", Box(0, 0, 4, 4)))


def test_synth_benign_prefix_stable_and_in_range():
    a = synth_benign(host_fingerprint(), 5, seed=3, tumor_fraction=0.5)
    b = synth_benign(host_fingerprint(), 8, seed=3, tumor_fraction=0.5)
    assert np.array_equal(a, b[:5])
    assert a.dtype == np.float32 and a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("kind,real,fake", [("inject", "TM", "FM"), ("remove", "TB", "FB")])
def test_make_corpus(kind, real, fake):
    c = make_corpus(kind, [host_fingerprint("A"), host_fingerprint("B")], 4, 3, seed=1, size=64)
    assert len(c) == 7 and c.labels == [real] * 4 + [fake] * 3
    assert c.scanner_ids[:2] == ["A", "B"]
    assert c.patches.min() >= 0 and c.patches.max() <= 1
    assert c.is_fake.sum() == 3 and all(ctr == (32, 32) for ctr in c.centers)
    assert c.recipes[0] is None and c.recipes[-1]["kind"] in ("Inject", "Remove")
    again = make_corpus(kind, [host_fingerprint("A"), host_fingerprint("B")], 4, 3, seed=1, size=64)
    assert np.array_equal(c.patches, again.patches)


def test_partial_swap_endpoints():
    rng = np.random.default_rng(0)
    content = np.full((16, 16), 0.5)
    host, foreign = 0.01 * rng.normal(size=(2, 16, 16))
    box = Box(4, 4, 8, 8)
    assert np.array_equal(with_partial_swap(content, host, foreign, box, 0.0), content + host)
    full = with_partial_swap(content, host, foreign, box, 1.0)
    m = box.as_mask((16, 16))
    assert np.array_equal(full[m], (content + foreign)[m]) and np.array_equal(full[~m], (content + host)[~m])
