"""Pure-numpy executor for the ONNX op subset GAP+FC classifiers use.

Inference only, NCHW layout, group=1 convolutions. The op table covers the
common backbone vocabulary (Conv, BatchNormalization, pooling, Gemm, the
elementwise activations); anything else raises UnsupportedOperatorError
naming the op.
"""
from __future__ import annotations

from typing import Dict, Iterable, List

import numpy as np

from . import onnxio
from .errors import BackendExecutionError, UnsupportedOperatorError


def _pool_windows(x: np.ndarray, kernel, strides, pads, dilations=(1, 1)) -> np.ndarray:
    """View of sliding windows, shape (N, C, HO, WO, KH, KW)."""
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = strides
    dh, dw = dilations
    pt, pl, pb, pr = pads
    if pt or pl or pb or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    eh = dh * (kh - 1) + 1
    ew = dw * (kw - 1) + 1
    ho = (x.shape[2] - eh) // sh + 1
    wo = (x.shape[3] - ew) // sw + 1
    if ho < 1 or wo < 1:
        raise BackendExecutionError(f"pooling window {kernel} larger than input {h}x{w}")
    s = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2] * dh, s[3] * dw),
        writeable=False,
    )


class GraphExecutor:
    """Evaluates a decoded ONNX graph on numpy inputs.

    Stateless between runs: every call builds a fresh value table, so one
    executor can serve concurrent forward passes.
    """

    def __init__(self, model: onnxio.Model, model_path: str = ""):
        self.model = model
        self.graph = model.graph
        self.model_path = model_path
        self._constants: Dict[str, np.ndarray] = {
            name: t.array for name, t in self.graph.initializers.items()
        }
        for node in self.graph.nodes:
            if not hasattr(self, f"_op_{node.op_type.lower()}"):
                raise UnsupportedOperatorError(
                    f"operator {node.op_type!r} is not supported by this executor",
                    model_path,
                )

    def run(self, feeds: Dict[str, np.ndarray], fetch: Iterable[str]) -> Dict[str, np.ndarray]:
        values: Dict[str, np.ndarray] = dict(self._constants)
        for name, arr in feeds.items():
            values[name] = np.asarray(arr)
        try:
            for node in self.graph.nodes:
                args: List[np.ndarray] = []
                for name in node.inputs:
                    if name == "":
                        args.append(None)  # omitted optional input
                    elif name in values:
                        args.append(values[name])
                    else:
                        raise BackendExecutionError(
                            f"node {node.name or node.op_type}: input {name!r} not computed "
                            "(graph not topologically ordered?)",
                            self.model_path,
                        )
                outs = getattr(self, f"_op_{node.op_type.lower()}")(node, args)
                for name, arr in zip(node.outputs, outs):
                    if name:
                        values[name] = arr
        except BackendExecutionError:
            raise
        except Exception as exc:
            raise BackendExecutionError(f"execution failed at {node.op_type}: {exc}",
                                        self.model_path) from exc
        missing = [n for n in fetch if n not in values]
        if missing:
            raise BackendExecutionError(f"requested tensors not in graph: {missing}", self.model_path)
        return {n: values[n] for n in fetch}

    # -- operator implementations ------------------------------------------

    @staticmethod
    def _conv_attrs(node: onnxio.Node, x: np.ndarray, w: np.ndarray):
        kernel = node.attr_ints("kernel_shape", list(w.shape[2:]))
        strides = node.attr_ints("strides", [1, 1])
        dilations = node.attr_ints("dilations", [1, 1])
        pads = node.attr_ints("pads", [0, 0, 0, 0])
        auto_pad = node.attrs.get("auto_pad")
        if auto_pad is not None and bytes(auto_pad.value) not in (b"", b"NOTSET"):
            raise UnsupportedOperatorError("auto_pad is not supported; use explicit pads")
        return kernel, strides, pads, dilations

    def _op_conv(self, node, args):
        x, w = args[0], args[1]
        b = args[2] if len(args) > 2 else None
        if node.attr_i("group", 1) != 1:
            raise UnsupportedOperatorError("grouped convolution is not supported")
        kernel, strides, pads, dilations = self._conv_attrs(node, x, w)
        win = _pool_windows(x, kernel, strides, pads, dilations)
        n, c, ho, wo, kh, kw = win.shape
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        flt = w.reshape(w.shape[0], -1)
        out = cols @ flt.T
        out = out.reshape(n, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b[None, :, None, None]
        return [out.astype(x.dtype, copy=False)]

    def _op_maxpool(self, node, args):
        x = args[0]
        kernel = node.attr_ints("kernel_shape")
        strides = node.attr_ints("strides", [1, 1])
        pads = node.attr_ints("pads", [0, 0, 0, 0])
        win = _pool_windows(x, kernel, strides, pads)
        return [win.max(axis=(4, 5))]

    def _op_averagepool(self, node, args):
        x = args[0]
        kernel = node.attr_ints("kernel_shape")
        strides = node.attr_ints("strides", [1, 1])
        pads = node.attr_ints("pads", [0, 0, 0, 0])
        if any(pads) and node.attr_i("count_include_pad", 0) == 0:
            raise UnsupportedOperatorError("AveragePool with exclude-pad counting is not supported")
        win = _pool_windows(x, kernel, strides, pads)
        return [win.mean(axis=(4, 5), dtype=np.float64).astype(x.dtype)]

    def _op_globalaveragepool(self, node, args):
        x = args[0]
        return [x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)]

    def _op_gemm(self, node, args):
        a, b = args[0], args[1]
        c = args[2] if len(args) > 2 else None
        if node.attr_i("transA", 0):
            a = a.T
        if node.attr_i("transB", 0):
            b = b.T
        out = node.attr_f("alpha", 1.0) * (a @ b)
        if c is not None:
            out = out + node.attr_f("beta", 1.0) * c
        return [out.astype(args[0].dtype, copy=False)]

    def _op_matmul(self, node, args):
        return [args[0] @ args[1]]

    def _op_relu(self, node, args):
        return [np.maximum(args[0], 0)]

    def _op_sigmoid(self, node, args):
        x = args[0]
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return [out]

    def _op_softmax(self, node, args):
        x = args[0]
        axis = node.attr_i("axis", -1)
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return [e / e.sum(axis=axis, keepdims=True)]

    def _op_add(self, node, args):
        return [args[0] + args[1]]

    def _op_sub(self, node, args):
        return [args[0] - args[1]]

    def _op_mul(self, node, args):
        return [args[0] * args[1]]

    def _op_div(self, node, args):
        return [args[0] / args[1]]

    def _op_batchnormalization(self, node, args):
        x, scale, bias, mean, var = args[:5]
        eps = node.attr_f("epsilon", 1e-5)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        inv = scale.reshape(shape) / np.sqrt(var.reshape(shape) + eps)
        return [(x - mean.reshape(shape)) * inv + bias.reshape(shape)]

    def _op_flatten(self, node, args):
        x = args[0]
        axis = node.attr_i("axis", 1)
        lead = int(np.prod(x.shape[:axis])) if axis else 1
        return [x.reshape(lead, -1)]

    def _op_reshape(self, node, args):
        x, shape = args[0], args[1].astype(np.int64).tolist()
        resolved = [x.shape[i] if s == 0 else s for i, s in enumerate(shape)]
        return [x.reshape(resolved)]

    def _op_transpose(self, node, args):
        perm = node.attr_ints("perm")
        return [args[0].transpose(perm) if perm else args[0].T]

    def _op_concat(self, node, args):
        return [np.concatenate(args, axis=node.attr_i("axis", 0))]

    def _op_identity(self, node, args):
        return [args[0]]

    def _op_dropout(self, node, args):
        return [args[0]]

    def _op_constant(self, node, args):
        attr = node.attrs.get("value")
        if attr is None or attr.type != onnxio.ATTR_TENSOR:
            raise UnsupportedOperatorError("Constant without a tensor value attribute")
        return [attr.value.array]
