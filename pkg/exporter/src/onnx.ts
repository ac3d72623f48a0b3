/**
 * Minimal ONNX serializer: hand-encoded protobuf wire format for the
 * message subset a small classifier graph needs (ModelProto, GraphProto,
 * NodeProto, TensorProto, AttributeProto, ValueInfoProto).
 */

export const DT_FLOAT = 1;
export const DT_INT64 = 7;

export const ATTR_FLOAT = 1;
export const ATTR_INT = 2;
export const ATTR_TENSOR = 4;
export const ATTR_INTS = 7;

const WIRE_VARINT = 0;
const WIRE_LEN = 2;
const WIRE_FIXED32 = 5;

function varint(value: number | bigint): Buffer {
  let v = BigInt(value);
  if (v < 0n) v &= (1n << 64n) - 1n;
  const out: number[] = [];
  for (;;) {
    const b = Number(v & 0x7fn);
    v >>= 7n;
    if (v > 0n) {
      out.push(b | 0x80);
    } else {
      out.push(b);
      return Buffer.from(out);
    }
  }
}

function tag(fieldNo: number, wire: number): Buffer {
  return varint((fieldNo << 3) | wire);
}

function lenField(fieldNo: number, payload: Buffer): Buffer {
  return Buffer.concat([tag(fieldNo, WIRE_LEN), varint(payload.length), payload]);
}

function strField(fieldNo: number, s: string): Buffer {
  return lenField(fieldNo, Buffer.from(s, "utf-8"));
}

function intField(fieldNo: number, v: number): Buffer {
  return Buffer.concat([tag(fieldNo, WIRE_VARINT), varint(v)]);
}

function floatField(fieldNo: number, v: number): Buffer {
  const b = Buffer.alloc(4);
  b.writeFloatLE(v, 0);
  return Buffer.concat([tag(fieldNo, WIRE_FIXED32), b]);
}

export interface TensorInit {
  name: string;
  dims: number[];
  /** float32 payload; int64 tensors use dataType DT_INT64 with BigInt64 values */
  data: Float32Array;
}

export type AttrValue =
  | { kind: "int"; value: number }
  | { kind: "ints"; value: number[] }
  | { kind: "float"; value: number };

export interface NodeSpec {
  opType: string;
  inputs: string[];
  outputs: string[];
  name?: string;
  attrs?: Record<string, AttrValue>;
}

export interface ValueSpec {
  name: string;
  /** null marks a dynamic dimension */
  dims: Array<number | null>;
}

export interface GraphSpec {
  name: string;
  nodes: NodeSpec[];
  initializers: TensorInit[];
  inputs: ValueSpec[];
  outputs: ValueSpec[];
}

export interface ModelSpec {
  graph: GraphSpec;
  irVersion?: number;
  opsetVersion?: number;
  producerName?: string;
  producerVersion?: string;
}

function encodeTensor(t: TensorInit): Buffer {
  const parts: Buffer[] = [];
  for (const d of t.dims) parts.push(intField(1, d));
  parts.push(intField(2, DT_FLOAT));
  parts.push(strField(8, t.name));
  const raw = Buffer.alloc(t.data.length * 4);
  for (let i = 0; i < t.data.length; i++) raw.writeFloatLE(t.data[i], i * 4);
  parts.push(lenField(9, raw));
  return Buffer.concat(parts);
}

function encodeAttr(name: string, attr: AttrValue): Buffer {
  const parts: Buffer[] = [strField(1, name)];
  if (attr.kind === "float") {
    parts.push(floatField(2, attr.value));
    parts.push(intField(20, ATTR_FLOAT));
  } else if (attr.kind === "int") {
    parts.push(intField(3, attr.value));
    parts.push(intField(20, ATTR_INT));
  } else {
    for (const v of attr.value) parts.push(intField(8, v));
    parts.push(intField(20, ATTR_INTS));
  }
  return Buffer.concat(parts);
}

function encodeNode(n: NodeSpec): Buffer {
  const parts: Buffer[] = [];
  for (const i of n.inputs) parts.push(strField(1, i));
  for (const o of n.outputs) parts.push(strField(2, o));
  if (n.name) parts.push(strField(3, n.name));
  parts.push(strField(4, n.opType));
  for (const [key, attr] of Object.entries(n.attrs ?? {})) {
    parts.push(lenField(5, encodeAttr(key, attr)));
  }
  return Buffer.concat(parts);
}

function encodeValueInfo(v: ValueSpec): Buffer {
  const dims: Buffer[] = [];
  for (const d of v.dims) {
    dims.push(lenField(1, d === null ? Buffer.alloc(0) : intField(1, d)));
  }
  const tensorType = Buffer.concat([intField(1, DT_FLOAT),
                                    lenField(2, Buffer.concat(dims))]);
  const typeProto = lenField(1, tensorType);
  return Buffer.concat([strField(1, v.name), lenField(2, typeProto)]);
}

function encodeGraph(g: GraphSpec): Buffer {
  const parts: Buffer[] = [];
  for (const n of g.nodes) parts.push(lenField(1, encodeNode(n)));
  parts.push(strField(2, g.name));
  for (const t of g.initializers) parts.push(lenField(5, encodeTensor(t)));
  for (const v of g.inputs) parts.push(lenField(11, encodeValueInfo(v)));
  for (const v of g.outputs) parts.push(lenField(12, encodeValueInfo(v)));
  return Buffer.concat(parts);
}

export function encodeModel(m: ModelSpec): Buffer {
  const parts: Buffer[] = [intField(1, m.irVersion ?? 8)];
  if (m.producerName) parts.push(strField(2, m.producerName));
  if (m.producerVersion) parts.push(strField(3, m.producerVersion));
  parts.push(lenField(7, encodeGraph(m.graph)));
  const opset = Buffer.concat([strField(1, ""), intField(2, m.opsetVersion ?? 13)]);
  parts.push(lenField(8, opset));
  return Buffer.concat(parts);
}
