"""
Network building blocks for the driver model.

Parameters live in a `ParameterStore` of named numpy arrays. A forward pass
binds them to a tape (`bind`) for training or wraps them as constants for
inference; layer functions below take the bound tensors explicitly.
"""

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from SHARED.drive_sdk import autodiff as ad
from SHARED.drive_sdk.autodiff import Tape, Tensor
from SHARED.drive_sdk.config_loader import AgentModelConfig
from SHARED.drive_sdk.errors import ShapeError
from SHARED.drive_sdk.kinematics import action_dim
from SHARED.drive_sdk.repositories import parameter_checksum

Params = Dict[str, Tensor]

ENCODER_KERNEL = 4
ENCODER_STRIDE = 2
ENCODER_PADDING = 1
IMAGE_CHANNELS = 3


class ParameterStore:
    """Named parameter arrays with deterministic ordering"""

    def __init__(self, arrays: Optional[Dict[str, np.ndarray]] = None, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._arrays: Dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            self._arrays[name] = np.array(arr, dtype=self.dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._arrays[name] = np.array(value, dtype=self.dtype)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> List[str]:
        return sorted(self._arrays)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.names():
            yield name, self._arrays[name]

    @property
    def num_parameters(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def bind(self, tape: Tape) -> Params:
        """Record every parameter as a leaf on the tape"""
        return {name: tape.leaf(arr) for name, arr in self.items()}

    def constants(self) -> Params:
        """Unrecorded view for inference"""
        return {name: Tensor(arr) for name, arr in self.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore({n: a.copy() for n, a in self.items()}, dtype=self.dtype)

    def checksum(self) -> str:
        """SHA-256 over names, shapes and raw little-endian float64 bytes"""
        return parameter_checksum(self._arrays)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.items()}


# Initialization
def _glorot(
    rng: np.random.Generator, fan_in: int, fan_out: int, shape, gain: float = 1.0
) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_driver_parameters(config: AgentModelConfig) -> ParameterStore:
    """
    Seeded initialization of every driver parameter.

    Layout:
        enc.conv{l}.weight/bias, enc.fc.weight/bias
        gru{l}.w_x/b_x/w_h/b_h (gates packed as [update, reset, candidate])
        post.fc1/post.fc2, dec.fc1/dec.fc2
    """
    rng = np.random.default_rng(config.init_seed)
    A = action_dim(config.kinematic_mode)
    H, Z, F, M = config.hidden_dim, config.latent_dim, config.feature_dim, config.mlp_dim
    k = ENCODER_KERNEL
    arrays: Dict[str, np.ndarray] = {}

    c_in = IMAGE_CHANNELS
    for l, c_out in enumerate(config.encoder_channels):
        fan_in, fan_out = c_in * k * k, c_out * k * k
        arrays[f"enc.conv{l}.weight"] = _glorot(rng, fan_in, fan_out, (c_out, c_in, k, k))
        arrays[f"enc.conv{l}.bias"] = np.zeros(c_out)
        c_in = c_out
    flat = c_in * config.encoder_output_px ** 2
    arrays["enc.fc.weight"] = _glorot(rng, flat, F, (flat, F))
    arrays["enc.fc.bias"] = np.zeros(F)

    in_dim = F + Z + A
    for l in range(config.num_layers):
        arrays[f"gru{l}.w_x"] = _glorot(rng, in_dim, H, (in_dim, 3 * H))
        arrays[f"gru{l}.b_x"] = np.zeros(3 * H)
        arrays[f"gru{l}.w_h"] = _glorot(rng, H, H, (H, 3 * H))
        arrays[f"gru{l}.b_h"] = np.zeros(3 * H)
        in_dim = H

    post_in = A + F + H
    arrays["post.fc1.weight"] = _glorot(rng, post_in, M, (post_in, M))
    arrays["post.fc1.bias"] = np.zeros(M)
    arrays["post.fc2.weight"] = _glorot(rng, M, 2 * Z, (M, 2 * Z), gain=0.1)
    arrays["post.fc2.bias"] = np.zeros(2 * Z)

    dec_in = F + Z + H
    arrays["dec.fc1.weight"] = _glorot(rng, dec_in, M, (dec_in, M))
    arrays["dec.fc1.bias"] = np.zeros(M)
    arrays["dec.fc2.weight"] = _glorot(rng, M, A, (M, A), gain=0.1)
    arrays["dec.fc2.bias"] = np.zeros(A)
    return ParameterStore(arrays, dtype=np.dtype(config.precision))


# Layers
def linear(x: Tensor, p: Params, name: str) -> Tensor:
    return ad.matmul(x, p[f"{name}.weight"]) + p[f"{name}.bias"]


def mlp(x: Tensor, p: Params, prefix: str) -> Tensor:
    """Two linear layers with a tanh in between"""
    return linear(ad.tanh(linear(x, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")


def conv_encoder(images: Tensor, p: Params, config: AgentModelConfig) -> Tensor:
    """
    Birdview images (N, 3, R, R) to features (N, feature_dim).

    Each layer is a 4x4 stride-2 convolution with ReLU; the flattened map goes
    through one linear layer without activation.
    """
    R = config.birdview_resolution
    if images.ndim != 4 or images.shape[1:] != (IMAGE_CHANNELS, R, R):
        raise ShapeError(f"encoder expects (N, 3, {R}, {R}) images, got {images.shape}")
    x = images - 0.5
    for l in range(len(config.encoder_channels)):
        x = ad.relu(ad.conv2d(
            x,
            p[f"enc.conv{l}.weight"],
            p[f"enc.conv{l}.bias"],
            stride=ENCODER_STRIDE,
            padding=ENCODER_PADDING,
        ))
    x = x.reshape(x.shape[0], -1)
    return linear(x, p, "enc.fc")


def gru_cell(x: Tensor, h: Tensor, p: Params, name: str) -> Tensor:
    """
    One gated recurrent unit step.

    z = sigmoid(W_z x + U_z h), r = sigmoid(W_r x + U_r h),
    g = tanh(W_g x + r * (U_g h)), h' = (1 - z) * g + z * h
    """
    H = h.shape[-1]
    gx = ad.matmul(x, p[f"{name}.w_x"]) + p[f"{name}.b_x"]
    gh = ad.matmul(h, p[f"{name}.w_h"]) + p[f"{name}.b_h"]
    z = ad.sigmoid(gx[:, :H] + gh[:, :H])
    r = ad.sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    g = ad.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    return (1.0 - z) * g + z * h


def stacked_gru(x: Tensor, h: List[Tensor], p: Params) -> List[Tensor]:
    """Run every GRU layer once; layer l feeds layer l+1"""
    out = []
    inp = x
    for l, h_l in enumerate(h):
        inp = gru_cell(inp, h_l, p, f"gru{l}")
        out.append(inp)
    return out
