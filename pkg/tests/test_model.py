import numpy as np
import pytest
import torch

from mpcs.errors import ShapeMismatch, UnknownEncoder
from mpcs.model import (
    PIXEL_MEAN,
    PIXEL_STD,
    Classifier,
    ClassifierHead,
    ProjectionHead,
    build_encoder,
    encode,
    head_dims_for,
    project,
    state_hash,
    to_tensor,
)
from mpcs.train import Checkpoint, random_init_checkpoint


def _set_identity(head):
    with torch.no_grad():
        head.fc1.weight.copy_(torch.eye(head.fc1.weight.shape[0], head.fc1.weight.shape[1]))
        head.fc2.weight.copy_(torch.eye(head.fc2.weight.shape[0], head.fc2.weight.shape[1]))


def test_head_dims():
    assert head_dims_for("resnet50") == [1024, 128]
    assert head_dims_for("efficientnet_b2") == [2048, 1204, 128]
    assert head_dims_for("toy8") == [8, 4, 8]
    assert head_dims_for("toy256") == [256, 128, 128]
    assert head_dims_for("small_cnn") == [64, 32, 64]
    with pytest.raises(UnknownEncoder):
        head_dims_for("vgg")
    with pytest.raises(UnknownEncoder):
        build_encoder("vgg")


def test_toy_encoder_zero_image_deterministic():
    torch.manual_seed(0)
    enc = build_encoder("toy8")
    img = np.zeros((1, 4, 4, 3), np.uint8)
    a, b = encode(enc, img), encode(enc, img)
    assert a.shape == (1, 8) and torch.isfinite(a).all()
    assert torch.equal(a, b)


def test_encode_order_equivariant():
    torch.manual_seed(1)
    enc = build_encoder("small_cnn")
    batch = np.random.default_rng(0).integers(0, 256, (5, 32, 32, 3), dtype=np.uint8)
    perm = np.array([3, 0, 4, 1, 2])
    torch.testing.assert_close(encode(enc, batch)[perm], encode(enc, batch[perm]))


def test_toy_linear_encoder_hand_value():
    enc = build_encoder("toy2")
    W = torch.tensor([[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    with torch.no_grad():
        enc.backbone.proj.weight.copy_(W[:, :, None, None])
    img = np.array([[[0, 0, 0], [255, 255, 255]], [[255, 0, 0], [0, 0, 255]]], dtype=np.uint8)
    x = (img.astype(np.float64) / 255 - PIXEL_MEAN) / PIXEL_STD  # 2 x 2 x 3
    expected = x.reshape(-1, 3).mean(0) @ W.double().numpy().T
    np.testing.assert_allclose(encode(enc, img[None]).numpy()[0], expected, atol=1e-6)


def test_encode_shape_mismatch():
    enc = build_encoder("toy4", input_size=16)
    with pytest.raises(ShapeMismatch):
        encode(enc, np.zeros((1, 8, 8, 3), np.uint8))
    with pytest.raises(ShapeMismatch):
        encode(enc, np.zeros((1, 16, 16), np.uint8))


def test_encode_restores_training_flag():
    enc = build_encoder("small_cnn")
    enc.train()
    encode(enc, np.zeros((2, 16, 16, 3), np.uint8))
    assert enc.training


def test_project_rectifier_and_identity():
    head = ProjectionHead(4, 4, 4, bias=False)
    _set_identity(head)
    neg = -torch.rand(3, 4) - 0.1
    assert torch.equal(project(head, neg), torch.zeros(3, 4))
    pos = torch.rand(3, 4)
    torch.testing.assert_close(project(head, pos), pos)


def test_project_matmul_oracle():
    rng = np.random.default_rng(0)
    head = ProjectionHead(4, 5, 2, bias=True).double()
    W1, b1 = rng.normal(size=(5, 4)) * 0.1, rng.normal(size=5) * 0.1
    W2, b2 = rng.normal(size=(2, 5)) * 0.1, rng.normal(size=2) * 0.1
    with torch.no_grad():
        head.fc1.weight.copy_(torch.tensor(W1))
        head.fc1.bias.copy_(torch.tensor(b1))
        head.fc2.weight.copy_(torch.tensor(W2))
        head.fc2.bias.copy_(torch.tensor(b2))
    H = rng.normal(size=(3, 4))
    expected = np.maximum(H @ W1.T + b1, 0) @ W2.T + b2
    np.testing.assert_allclose(project(head, torch.tensor(H)).detach().numpy(), expected, atol=1e-6)


def test_project_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        project(ProjectionHead(4, 2, 2), torch.zeros(3, 5))


def test_project_homogeneous_without_bias():
    torch.manual_seed(2)
    head = ProjectionHead(6, 3, 4, bias=False)
    H = torch.rand(5, 6)
    torch.testing.assert_close(project(head, 2.5 * H), 2.5 * project(head, H))


def test_head_for_encoder_widths():
    enc = build_encoder("toy8")
    head = ProjectionHead.for_encoder(enc)
    assert (head.in_dim, head.hidden_dim, head.out_dim) == (8, 4, 8)


def test_gradcheck_encode_and_project():
    torch.manual_seed(3)
    enc = build_encoder("toy64").double()
    head = ProjectionHead.for_encoder(enc).double()
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: head(enc(t)), (x,), eps=1e-6, atol=1e-6, rtol=1e-4)
    w = enc.backbone.proj.weight

    def f(weight):
        return torch.nn.functional.conv2d(x.detach(), weight).mean(dim=(2, 3))

    assert torch.autograd.gradcheck(f, (w.detach().clone().requires_grad_(True),), eps=1e-6, atol=1e-6)


def test_classifier_head_dropout_only_in_training():
    torch.manual_seed(4)
    head = ClassifierHead(16, 3, dropout=0.5)
    h = torch.randn(4, 16)
    head.eval()
    assert torch.equal(head(h), head(h))
    head.train()
    outs = {tuple(head(h).flatten().tolist()) for _ in range(5)}
    assert len(outs) > 1


def test_classifier_standardization():
    head = ClassifierHead(3, 2, dropout=0.0)
    feats = torch.tensor([[1.0, 10.0, 0.0], [3.0, 30.0, 0.0]])
    head.fit_standardization(feats)
    torch.testing.assert_close(head.feature_mean, torch.tensor([2.0, 20.0, 0.0]))
    assert head.feature_scale[2] > 0


def test_checkpoint_round_trip_bit_identical(tmp_path):
    ckpt = random_init_checkpoint("small_cnn", seed=5)
    enc = ckpt.build_encoder()
    path = ckpt.save(tmp_path / "c.pt")
    back = Checkpoint.load(path)
    x = np.random.default_rng(0).integers(0, 256, (3, 32, 32, 3), dtype=np.uint8)
    assert torch.equal(encode(enc, x), encode(back.build_encoder(), x))
    assert back.manifest == ckpt.manifest
    assert state_hash(enc) == state_hash(back.build_encoder())


def test_classifier_checkpoint_round_trip(tmp_path):
    torch.manual_seed(6)
    enc = build_encoder("small_cnn")
    model = Classifier(enc, ClassifierHead(enc.feature_dim, 2))
    model.eval()
    from mpcs.train import _state

    ckpt = Checkpoint("small_cnn", _state(enc), "classifier", _state(model.head),
                      {"in_dim": 64, "n_classes": 2, "dropout": 0.3}, {"kind": "finetune"})
    back = Checkpoint.load(ckpt.save(tmp_path / "f.pt")).build_classifier()
    back.eval()
    x = to_tensor(np.random.default_rng(1).integers(0, 256, (2, 32, 32, 3), dtype=np.uint8))
    assert torch.equal(model(x), back(x))


@pytest.mark.parametrize("name,dim", [("resnet50", 2048), ("efficientnet_b2", 1408)])
def test_torchvision_encoders_build(name, dim):
    enc = build_encoder(name)
    assert enc.feature_dim == dim and enc.weights_source == "random"
    head = ProjectionHead.for_encoder(enc)
    assert head.in_dim == dim and head.out_dim == 128


def test_external_weights(tmp_path):
    torch.manual_seed(7)
    src = build_encoder("toy4")
    torch.save(src.backbone.state_dict(), tmp_path / "w.pt")
    enc = build_encoder("toy4", weights=str(tmp_path / "w.pt"))
    assert enc.weights_source == "external_pretrained"
    assert torch.equal(enc.backbone.proj.weight, src.backbone.proj.weight)
