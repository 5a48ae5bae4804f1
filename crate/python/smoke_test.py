"""Smoke test for the fnfdenoise extension.

Build and install it first, e.g. `maturin develop -m crates/python/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math
import os
import struct
import tempfile

import fnfdenoise as fd

SIM = '{"crop_size": 64}'


def f32(v):
    return struct.unpack("<f", struct.pack("<f", v))[0]


def main():
    assert fd.footprint(15, 4) == 57

    sample = fd.Sample.simulate(seed=1, index=0, config=SIM)
    sample.validate()
    assert (sample.y.height, sample.y.width) == (64, 64)
    assert sample.dim_factor >= 2.0 and sample.reference == "noflash"

    model = fd.Model.init('{"j": 2, "k": 3, "d": 1, "base_channels": 4}', seed=0)
    assert model.variant == "ours"
    out = model.denoise(sample)
    assert (out.height, out.width) == (64, 64)
    f, g = model.intermediates(sample)
    fg = [f32(a * b) for a, b in zip(f.to_list(), g.to_list())]
    assert fg == out.to_list()

    rendered = fd.render_srgb(out, gain=sample.dim_factor)
    truth = fd.render_srgb(sample.y, gain=sample.dim_factor)
    p = fd.psnr(rendered, truth)
    s = fd.ssim(rendered, truth)
    assert math.isfinite(p) and -1.0 <= s <= 1.0
    assert fd.psnr(truth, truth) == math.inf

    raw = out.to_bytes()
    assert struct.unpack_from("<f", raw, 0)[0] == out.get(0, 0, 0)
    again = fd.Image.from_bytes(64, 64, raw)
    assert again.to_list() == out.to_list()

    losses = model.train(3, sim=SIM)
    assert len(losses) == 3 and all(math.isfinite(v) for v in losses)

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "ckpt")
        model.save(ckpt)
        loaded = fd.Model.load(ckpt)
        assert loaded.denoise(sample).to_list() == model.denoise(sample).to_list()
        path = os.path.join(tmp, "s.npzlike")
        sample.save(path)
        assert fd.Sample.load(path).y.to_list() == sample.y.to_list()

    try:
        fd.Sample.simulate(seed=0, config='{"crop_size": 100}')
    except ValueError:
        pass
    else:
        raise AssertionError("crop size 100 should be rejected")

    print(f"fnfdenoise {fd.__version__}: smoke test passed (psnr {p:.2f} dB, ssim {s:.3f})")


if __name__ == "__main__":
    main()
