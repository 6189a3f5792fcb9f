import torch

from repcm.model import FiLM, RegionInjection, SinusoidalEncoding


def test_positional_encoding_zero_pattern_and_shape():
    pe = SinusoidalEncoding(3, 16, n_freqs=4)
    feats = pe.features(torch.zeros(7, 3))
    assert feats.shape == (7, 3 * 2 * 4)
    sin, cos = feats.reshape(7, 3, 2, 4).unbind(2)
    assert torch.all(sin == 0) and torch.all(cos == 1)
    assert pe(torch.randn(11, 3)).shape == (11, 16)


def test_positional_encoding_is_absolute():
    pe = SinusoidalEncoding(3, 8)
    x = torch.randn(5, 3)
    assert not torch.allclose(pe(x), pe(x + 1.0))


def test_independent_encodings():
    a, b = SinusoidalEncoding(3, 8), SinusoidalEncoding(3, 8)
    assert a.proj.weight.data_ptr() != b.proj.weight.data_ptr()


def test_film_identity_at_init():
    film = FiLM(6).double()
    x, c = torch.randn(4, 6, dtype=torch.float64), torch.randn(4, 6, dtype=torch.float64)
    assert torch.equal(film(x, c), x)


def test_film_constant_shift():
    film = FiLM(5)
    with torch.no_grad():
        film.beta.bias.fill_(2.5)
    x = torch.randn(3, 5)
    torch.testing.assert_close(film(x, torch.randn(3, 5)), x + 2.5)


def test_film_gamma_gradient_matches_finite_differences():
    torch.manual_seed(0)
    film = FiLM(4).double()
    with torch.no_grad():
        for p in film.parameters():
            p.normal_()
    x, c = torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
    target = torch.randn(3, 4, dtype=torch.float64)

    def loss():
        return torch.sum((film(x, c) - target) ** 2)

    loss().backward()
    h = 1e-5
    for p in (film.gamma.weight, film.gamma.bias):
        num = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = loss().item()
            flat[i] = old - h
            down = loss().item()
            flat[i] = old
            num.view(-1)[i] = (up - down) / (2 * h)
        rel = (p.grad - num).norm() / num.norm()
        assert rel < 1e-4


def test_region_injection_identity_at_init():
    inj = RegionInjection(8, 3)
    x0, xT = torch.randn(2, 6, 8), torch.randn(2, 6, 8)
    ids = torch.tensor([0, 0, 1, 1, 2, 2])
    y0, yT, w = inj(x0, xT, ids, torch.eye(3))
    assert torch.equal(y0, x0) and torch.equal(yT, xT)
    assert w.shape[-2:] == (3, 3)
