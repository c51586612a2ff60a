import pytest
import torch

from nerfvq.diffcore import ContractViolation, gradient_check, make_generator
from nerfvq.nets import Discriminator, Encoder, TriplaneDecoder, decode_to_triplanes, discriminate, encode_image
from nerfvq.pipeline.config import TrainConfig


def test_encoder_grid_shapes():
    torch.manual_seed(0)
    enc = Encoder(image_size=256, patch=8, dim=16, depth=1, heads=2, d_enc=8)
    with torch.no_grad():
        assert enc(torch.rand(1, 256, 256, 3)).shape == (1, 32, 32, 8)
    small = Encoder(image_size=64, patch=8, dim=16, depth=1, heads=2, d_enc=8)
    assert encode_image(small, torch.rand(64, 64, 3)).shape == (1, 8, 8, 8)
    with pytest.raises(ContractViolation):
        small(torch.rand(1, 32, 32, 3))


def test_encoder_deterministic():
    torch.manual_seed(0)
    enc = Encoder(image_size=16, patch=4, dim=16, depth=1, heads=2, d_enc=4)
    img = torch.rand(1, 16, 16, 3)
    assert torch.equal(enc(img), enc(img.clone()))
    assert torch.equal(enc(torch.cat([img, img]))[0], enc(torch.cat([img, img]))[1])


def test_encoder_gradient_check(f64):
    torch.manual_seed(1)
    enc = Encoder(image_size=8, patch=4, dim=8, depth=1, heads=2, d_enc=3).double()
    img = torch.rand(1, 8, 8, 3, generator=make_generator(0)).requires_grad_(True)
    assert gradient_check(lambda: enc(img).norm(), [img], h=1e-6) < 1e-4


def test_decoder_shape_contract():
    torch.manual_seed(0)
    dec = TriplaneDecoder(grid=4, d_in=8, dim=16, depth=1, heads=2, plane_res=16, plane_channels=5)
    planes, bg = dec(torch.randn(2, 4, 4, 8))
    assert planes.shape == (2, 3, 16, 16, 5) and bg.shape == (2, 3)
    tris = decode_to_triplanes(dec, torch.randn(1, 4, 4, 8))
    assert tris[0].planes.shape == (3, 16, 16, 5)
    with pytest.raises(ContractViolation):
        TriplaneDecoder(grid=4, plane_res=18)


def test_decoder_patch_layout_at_init():
    # with the refinement at zero, token (i, j) of the transformer output owns texel block (i, j)
    torch.manual_seed(0)
    dec = TriplaneDecoder(grid=4, d_in=8, dim=16, depth=1, heads=2, plane_res=12, plane_channels=2)
    x = torch.zeros(1, 16, 16)
    x[0, 1 * 4 + 2] = torch.randn(16, generator=make_generator(1))
    patches = dec.to_patches(x).transpose(1, 2).reshape(1, -1, 4, 4)
    fmap = dec.shuffle(patches) + dec.refine(dec.shuffle(patches))
    nonzero = fmap.abs().sum(dim=1)[0] > 0
    expected = torch.zeros(12, 12, dtype=torch.bool)
    expected[3:6, 6:9] = True
    assert torch.equal(nonzero, expected)


def test_paper_scale_plane_contract():
    cfg = TrainConfig.paper_scale()
    assert (cfg.model.plane_res, cfg.model.plane_channels) == (512, 32)
    torch.manual_seed(0)
    dec = TriplaneDecoder(grid=32, d_in=4, dim=8, depth=1, heads=2, plane_res=512, plane_channels=32)
    with torch.no_grad():
        planes, _ = dec(torch.randn(1, 32, 32, 4))
    assert planes.shape == (1, 3, 512, 512, 32)


def test_decoder_distinct_inputs_distinct_planes():
    torch.manual_seed(0)
    dec = TriplaneDecoder(grid=4, d_in=8, dim=16, depth=1, heads=2, plane_res=8, plane_channels=4)
    z = torch.randn(20, 4, 4, 8, generator=make_generator(3))
    with torch.no_grad():
        planes, _ = dec(z)
    flat = planes.reshape(20, -1)
    dists = torch.cdist(flat, flat) + torch.eye(20) * 1e9
    assert float(dists.min()) > 0


def test_discriminator_contracts():
    torch.manual_seed(0)
    main = Discriminator("main", 16, 8, 16)
    novel = Discriminator("novel", 16, 8, 16)
    assert discriminate(main, torch.rand(5, 16, 16, 3)).shape == (5,)
    assert novel(torch.rand(2, 16, 16, 4)).shape == (2,)
    with pytest.raises(ContractViolation):
        novel(torch.rand(2, 16, 16, 3))
    with pytest.raises(ContractViolation):
        main(torch.rand(2, 8, 8, 3))
    with pytest.raises(ContractViolation):
        Discriminator("other")


def test_discriminator_input_gradient_finite():
    torch.manual_seed(0)
    d = Discriminator("main", 16, 8, 16)
    x = torch.rand(3, 16, 16, 3, requires_grad=True)
    (g,) = torch.autograd.grad(d(x).sum(), [x])
    assert torch.isfinite(g).all() and g.abs().sum() > 0
