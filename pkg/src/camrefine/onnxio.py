"""Minimal ONNX model (de)serialization.

Reads and writes the protobuf wire format directly for the subset of the
ONNX schema a GAP+FC image classifier needs: ModelProto / GraphProto /
NodeProto / TensorProto / AttributeProto / ValueInfoProto. Unknown fields
are skipped on read, so files produced by standard exporters load as long
as they stay inside that subset. Written files are valid ONNX protobuf.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ModelError

# TensorProto.DataType values we understand.
DT_FLOAT = 1
DT_UINT8 = 2
DT_INT32 = 6
DT_INT64 = 7
DT_BOOL = 9
DT_DOUBLE = 11

_DTYPE_OF = {
    DT_FLOAT: np.dtype("<f4"),
    DT_UINT8: np.dtype("u1"),
    DT_INT32: np.dtype("<i4"),
    DT_INT64: np.dtype("<i8"),
    DT_BOOL: np.dtype("?"),
    DT_DOUBLE: np.dtype("<f8"),
}

# AttributeProto.AttributeType values.
ATTR_FLOAT = 1
ATTR_INT = 2
ATTR_STRING = 3
ATTR_TENSOR = 4
ATTR_FLOATS = 6
ATTR_INTS = 7
ATTR_STRINGS = 8


@dataclass
class Tensor:
    name: str
    data_type: int
    dims: Tuple[int, ...]
    array: np.ndarray


@dataclass
class Attribute:
    name: str
    type: int
    value: Union[int, float, bytes, Tensor, List[int], List[float], List[bytes]]


@dataclass
class Node:
    op_type: str
    inputs: List[str]
    outputs: List[str]
    name: str = ""
    attrs: Dict[str, Attribute] = field(default_factory=dict)

    def attr_i(self, key: str, default: Optional[int] = None) -> Optional[int]:
        a = self.attrs.get(key)
        return int(a.value) if a is not None else default

    def attr_f(self, key: str, default: Optional[float] = None) -> Optional[float]:
        a = self.attrs.get(key)
        return float(a.value) if a is not None else default

    def attr_ints(self, key: str, default=None):
        a = self.attrs.get(key)
        return [int(v) for v in a.value] if a is not None else default


@dataclass
class ValueInfo:
    name: str
    elem_type: int = DT_FLOAT
    # None marks a dynamic (named or absent) dimension.
    dims: Tuple[Optional[int], ...] = ()


@dataclass
class Graph:
    name: str = ""
    nodes: List[Node] = field(default_factory=list)
    initializers: Dict[str, Tensor] = field(default_factory=dict)
    inputs: List[ValueInfo] = field(default_factory=list)
    outputs: List[ValueInfo] = field(default_factory=list)


@dataclass
class Model:
    graph: Graph
    ir_version: int = 8
    opset_version: int = 13
    producer_name: str = ""
    producer_version: str = ""


# ---------------------------------------------------------------------------
# wire primitives

_WIRE_VARINT = 0
_WIRE_FIXED64 = 1
_WIRE_LEN = 2
_WIRE_FIXED32 = 5


def _uvarint(value: int) -> bytes:
    if value < 0:
        # Negative int64 values are encoded as 10-byte two's complement.
        value &= (1 << 64) - 1
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _tag(field_no: int, wire: int) -> bytes:
    return _uvarint((field_no << 3) | wire)


def _len_field(field_no: int, payload: bytes) -> bytes:
    return _tag(field_no, _WIRE_LEN) + _uvarint(len(payload)) + payload


def _str_field(field_no: int, s: str) -> bytes:
    return _len_field(field_no, s.encode("utf-8"))


def _int_field(field_no: int, v: int) -> bytes:
    return _tag(field_no, _WIRE_VARINT) + _uvarint(v)


def _float_field(field_no: int, v: float) -> bytes:
    return _tag(field_no, _WIRE_FIXED32) + struct.pack("<f", v)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0
        self.end = len(buf)

    def eof(self) -> bool:
        return self.pos >= self.end

    def varint(self) -> int:
        result = 0
        shift = 0
        while True:
            if self.pos >= self.end:
                raise ModelError("truncated varint in model file")
            b = self.buf[self.pos]
            self.pos += 1
            result |= (b & 0x7F) << shift
            if not b & 0x80:
                return result
            shift += 7
            if shift > 63:
                raise ModelError("varint overflow in model file")

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise ModelError("truncated field in model file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def fields(self):
        """Yield (field_no, wire_type, value); value is int for varint,
        bytes for length-delimited / fixed widths."""
        while not self.eof():
            key = self.varint()
            field_no, wire = key >> 3, key & 0x7
            if wire == _WIRE_VARINT:
                yield field_no, wire, self.varint()
            elif wire == _WIRE_LEN:
                yield field_no, wire, self.take(self.varint())
            elif wire == _WIRE_FIXED32:
                yield field_no, wire, self.take(4)
            elif wire == _WIRE_FIXED64:
                yield field_no, wire, self.take(8)
            else:
                raise ModelError(f"unsupported wire type {wire} in model file")


def _signed(v: int) -> int:
    # Reinterpret a decoded uint64 varint as int64.
    return v - (1 << 64) if v >= (1 << 63) else v


# ---------------------------------------------------------------------------
# decoding

def _parse_tensor(buf: bytes) -> Tensor:
    dims: List[int] = []
    data_type = DT_FLOAT
    name = ""
    raw: Optional[bytes] = None
    floats: List[float] = []
    ints64: List[int] = []
    ints32: List[int] = []
    for fno, wire, val in _Reader(buf).fields():
        if fno == 1 and wire == _WIRE_VARINT:
            dims.append(_signed(val))
        elif fno == 2 and wire == _WIRE_VARINT:
            data_type = val
        elif fno == 4:  # float_data, packed or not
            if wire == _WIRE_LEN:
                floats.extend(struct.unpack(f"<{len(val) // 4}f", val))
            else:
                floats.append(struct.unpack("<f", struct.pack("<I", val))[0])
        elif fno == 5:
            if wire == _WIRE_LEN:
                r = _Reader(val)
                while not r.eof():
                    ints32.append(_signed(r.varint()))
            else:
                ints32.append(_signed(val))
        elif fno == 7:
            if wire == _WIRE_LEN:
                r = _Reader(val)
                while not r.eof():
                    ints64.append(_signed(r.varint()))
            else:
                ints64.append(_signed(val))
        elif fno == 8 and wire == _WIRE_LEN:
            name = val.decode("utf-8")
        elif fno == 9 and wire == _WIRE_LEN:
            raw = val
    if data_type not in _DTYPE_OF:
        raise ModelError(f"tensor {name!r}: unsupported data type {data_type}")
    dtype = _DTYPE_OF[data_type]
    count = int(np.prod(dims)) if dims else 1
    if raw is not None:
        if len(raw) != count * dtype.itemsize:
            raise ModelError(f"tensor {name!r}: raw data length {len(raw)} does not match dims {dims}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims)
    elif floats and data_type == DT_FLOAT:
        arr = np.asarray(floats, dtype=dtype).reshape(dims)
    elif ints64 and data_type == DT_INT64:
        arr = np.asarray(ints64, dtype=dtype).reshape(dims)
    elif ints32 and data_type == DT_INT32:
        arr = np.asarray(ints32, dtype=dtype).reshape(dims)
    else:
        arr = np.zeros(dims, dtype=dtype)
    return Tensor(name=name, data_type=data_type, dims=tuple(dims), array=arr)


def _parse_attribute(buf: bytes) -> Attribute:
    name = ""
    atype = 0
    f_val: Optional[float] = None
    i_val: Optional[int] = None
    s_val: Optional[bytes] = None
    t_val: Optional[Tensor] = None
    floats: List[float] = []
    ints: List[int] = []
    strings: List[bytes] = []
    for fno, wire, val in _Reader(buf).fields():
        if fno == 1 and wire == _WIRE_LEN:
            name = val.decode("utf-8")
        elif fno == 2 and wire == _WIRE_FIXED32:
            f_val = struct.unpack("<f", val)[0]
        elif fno == 3 and wire == _WIRE_VARINT:
            i_val = _signed(val)
        elif fno == 4 and wire == _WIRE_LEN:
            s_val = val
        elif fno == 5 and wire == _WIRE_LEN:
            t_val = _parse_tensor(val)
        elif fno == 7:
            if wire == _WIRE_LEN:
                floats.extend(struct.unpack(f"<{len(val) // 4}f", val))
            else:
                floats.append(struct.unpack("<f", struct.pack("<I", val))[0])
        elif fno == 8:
            if wire == _WIRE_LEN:
                r = _Reader(val)
                while not r.eof():
                    ints.append(_signed(r.varint()))
            else:
                ints.append(_signed(val))
        elif fno == 9 and wire == _WIRE_LEN:
            strings.append(val)
        elif fno == 20 and wire == _WIRE_VARINT:
            atype = val
    if atype == 0:  # infer when the writer omitted the type enum
        if i_val is not None:
            atype = ATTR_INT
        elif f_val is not None:
            atype = ATTR_FLOAT
        elif s_val is not None:
            atype = ATTR_STRING
        elif t_val is not None:
            atype = ATTR_TENSOR
        elif ints:
            atype = ATTR_INTS
        elif floats:
            atype = ATTR_FLOATS
        elif strings:
            atype = ATTR_STRINGS
    value: Union[int, float, bytes, Tensor, List[int], List[float], List[bytes], None]
    if atype == ATTR_INT:
        value = i_val if i_val is not None else 0
    elif atype == ATTR_FLOAT:
        value = f_val if f_val is not None else 0.0
    elif atype == ATTR_STRING:
        value = s_val if s_val is not None else b""
    elif atype == ATTR_TENSOR:
        value = t_val
    elif atype == ATTR_INTS:
        value = ints
    elif atype == ATTR_FLOATS:
        value = floats
    elif atype == ATTR_STRINGS:
        value = strings
    else:
        raise ModelError(f"attribute {name!r}: unsupported attribute type {atype}")
    return Attribute(name=name, type=atype, value=value)


def _parse_node(buf: bytes) -> Node:
    node = Node(op_type="", inputs=[], outputs=[])
    for fno, wire, val in _Reader(buf).fields():
        if fno == 1 and wire == _WIRE_LEN:
            node.inputs.append(val.decode("utf-8"))
        elif fno == 2 and wire == _WIRE_LEN:
            node.outputs.append(val.decode("utf-8"))
        elif fno == 3 and wire == _WIRE_LEN:
            node.name = val.decode("utf-8")
        elif fno == 4 and wire == _WIRE_LEN:
            node.op_type = val.decode("utf-8")
        elif fno == 5 and wire == _WIRE_LEN:
            a = _parse_attribute(val)
            node.attrs[a.name] = a
    return node


def _parse_value_info(buf: bytes) -> ValueInfo:
    name = ""
    elem_type = DT_FLOAT
    dims: List[Optional[int]] = []
    for fno, wire, val in _Reader(buf).fields():
        if fno == 1 and wire == _WIRE_LEN:
            name = val.decode("utf-8")
        elif fno == 2 and wire == _WIRE_LEN:
            for f2, w2, v2 in _Reader(val).fields():
                if f2 == 1 and w2 == _WIRE_LEN:  # tensor_type
                    for f3, w3, v3 in _Reader(v2).fields():
                        if f3 == 1 and w3 == _WIRE_VARINT:
                            elem_type = v3
                        elif f3 == 2 and w3 == _WIRE_LEN:  # shape
                            for f4, w4, v4 in _Reader(v3).fields():
                                if f4 == 1 and w4 == _WIRE_LEN:  # dim
                                    dim_value: Optional[int] = None
                                    for f5, w5, v5 in _Reader(v4).fields():
                                        if f5 == 1 and w5 == _WIRE_VARINT:
                                            dim_value = _signed(v5)
                                    dims.append(dim_value)
    return ValueInfo(name=name, elem_type=elem_type, dims=tuple(dims))


def _parse_graph(buf: bytes) -> Graph:
    g = Graph()
    for fno, wire, val in _Reader(buf).fields():
        if fno == 1 and wire == _WIRE_LEN:
            g.nodes.append(_parse_node(val))
        elif fno == 2 and wire == _WIRE_LEN:
            g.name = val.decode("utf-8")
        elif fno == 5 and wire == _WIRE_LEN:
            t = _parse_tensor(val)
            g.initializers[t.name] = t
        elif fno == 11 and wire == _WIRE_LEN:
            g.inputs.append(_parse_value_info(val))
        elif fno == 12 and wire == _WIRE_LEN:
            g.outputs.append(_parse_value_info(val))
    return g


def parse_model(data: bytes) -> Model:
    """Decode ONNX ModelProto bytes."""
    ir_version = 0
    opset_version = 0
    producer_name = ""
    producer_version = ""
    graph: Optional[Graph] = None
    try:
        for fno, wire, val in _Reader(data).fields():
            if fno == 1 and wire == _WIRE_VARINT:
                ir_version = _signed(val)
            elif fno == 2 and wire == _WIRE_LEN:
                producer_name = val.decode("utf-8")
            elif fno == 3 and wire == _WIRE_LEN:
                producer_version = val.decode("utf-8")
            elif fno == 7 and wire == _WIRE_LEN:
                graph = _parse_graph(val)
            elif fno == 8 and wire == _WIRE_LEN:
                for f2, w2, v2 in _Reader(val).fields():
                    if f2 == 2 and w2 == _WIRE_VARINT:
                        opset_version = max(opset_version, _signed(v2))
    except ModelError:
        raise
    except Exception as exc:  # malformed UTF-8, bad reshape, ...
        raise ModelError(f"malformed model file: {exc}") from exc
    if graph is None:
        raise ModelError("model file has no graph")
    return Model(graph=graph, ir_version=ir_version, opset_version=opset_version or 13,
                 producer_name=producer_name, producer_version=producer_version)


def load_model_file(path: str) -> Model:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise ModelError(f"model file not found: {path}") from None
    return parse_model(data)


# ---------------------------------------------------------------------------
# encoding

def tensor_from_array(name: str, arr: np.ndarray) -> Tensor:
    a = np.asarray(arr)
    if a.dtype == np.float32:
        dt = DT_FLOAT
    elif a.dtype == np.int64:
        dt = DT_INT64
    elif a.dtype == np.float64:
        dt = DT_DOUBLE
    else:
        raise ModelError(f"unsupported initializer dtype {a.dtype}")
    return Tensor(name=name, data_type=dt, dims=tuple(a.shape), array=a)


def _encode_tensor(t: Tensor) -> bytes:
    out = bytearray()
    for d in t.dims:
        out += _int_field(1, d)
    out += _int_field(2, t.data_type)
    out += _str_field(8, t.name)
    raw = np.ascontiguousarray(t.array, dtype=_DTYPE_OF[t.data_type]).tobytes()
    out += _len_field(9, raw)
    return bytes(out)


def _encode_attribute(a: Attribute) -> bytes:
    out = bytearray()
    out += _str_field(1, a.name)
    if a.type == ATTR_FLOAT:
        out += _float_field(2, float(a.value))
    elif a.type == ATTR_INT:
        out += _int_field(3, int(a.value))
    elif a.type == ATTR_STRING:
        out += _len_field(4, a.value if isinstance(a.value, bytes) else str(a.value).encode())
    elif a.type == ATTR_TENSOR:
        out += _len_field(5, _encode_tensor(a.value))
    elif a.type == ATTR_FLOATS:
        for v in a.value:
            out += _float_field(7, float(v))
    elif a.type == ATTR_INTS:
        for v in a.value:
            out += _int_field(8, int(v))
    else:
        raise ModelError(f"cannot encode attribute type {a.type}")
    out += _int_field(20, a.type)
    return bytes(out)


def _encode_node(n: Node) -> bytes:
    out = bytearray()
    for name in n.inputs:
        out += _str_field(1, name)
    for name in n.outputs:
        out += _str_field(2, name)
    if n.name:
        out += _str_field(3, n.name)
    out += _str_field(4, n.op_type)
    for a in n.attrs.values():
        out += _len_field(5, _encode_attribute(a))
    return bytes(out)


def _encode_value_info(vi: ValueInfo) -> bytes:
    shape = bytearray()
    for d in vi.dims:
        dim = b"" if d is None else _int_field(1, d)
        shape += _len_field(1, dim)
    tensor_type = _int_field(1, vi.elem_type) + _len_field(2, bytes(shape))
    type_proto = _len_field(1, tensor_type)
    return _str_field(1, vi.name) + _len_field(2, type_proto)


def _encode_graph(g: Graph) -> bytes:
    out = bytearray()
    for n in g.nodes:
        out += _len_field(1, _encode_node(n))
    out += _str_field(2, g.name or "graph")
    for t in g.initializers.values():
        out += _len_field(5, _encode_tensor(t))
    for vi in g.inputs:
        out += _len_field(11, _encode_value_info(vi))
    for vi in g.outputs:
        out += _len_field(12, _encode_value_info(vi))
    return bytes(out)


def encode_model(m: Model) -> bytes:
    out = bytearray()
    out += _int_field(1, m.ir_version)
    if m.producer_name:
        out += _str_field(2, m.producer_name)
    if m.producer_version:
        out += _str_field(3, m.producer_version)
    out += _len_field(7, _encode_graph(m.graph))
    opset = b"" + _str_field(1, "") + _int_field(2, m.opset_version)
    out += _len_field(8, opset)
    return bytes(out)


def save_model_file(m: Model, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_model(m))
