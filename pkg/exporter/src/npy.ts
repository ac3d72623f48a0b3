/** NPY v1.0 writer for 2-D float64/float32/uint8 arrays. */

function header(dtype: string, shape: number[]): Buffer {
  const dict = `{'descr': '${dtype}', 'fortran_order': False, 'shape': (${shape.join(", ")}${shape.length === 1 ? "," : ""}), }`;
  // pad so magic + header is a multiple of 64 bytes, newline-terminated
  const base = 10 + dict.length + 1;
  const padded = Math.ceil(base / 64) * 64;
  const padding = " ".repeat(padded - base);
  const head = Buffer.from(dict + padding + "\n", "latin1");
  const out = Buffer.alloc(10 + head.length);
  out.write("\x93NUMPY", 0, "latin1");
  out.writeUInt8(1, 6);
  out.writeUInt8(0, 7);
  out.writeUInt16LE(head.length, 8);
  head.copy(out, 10);
  return out;
}

export function npyFloat64(data: number[][], shape?: number[]): Buffer {
  const h = data.length;
  const w = data[0].length;
  const head = header("<f8", shape ?? [h, w]);
  const body = Buffer.alloc(h * w * 8);
  let offset = 0;
  for (let i = 0; i < h; i++) {
    for (let j = 0; j < w; j++) {
      body.writeDoubleLE(data[i][j], offset);
      offset += 8;
    }
  }
  return Buffer.concat([head, body]);
}

export function npyFloat32(data: number[][]): Buffer {
  const h = data.length;
  const w = data[0].length;
  const head = header("<f4", [h, w]);
  const body = Buffer.alloc(h * w * 4);
  let offset = 0;
  for (let i = 0; i < h; i++) {
    for (let j = 0; j < w; j++) {
      body.writeFloatLE(Math.fround(data[i][j]), offset);
      offset += 4;
    }
  }
  return Buffer.concat([head, body]);
}

export function npyUint8(data: number[][]): Buffer {
  const h = data.length;
  const w = data[0].length;
  const head = header("|u1", [h, w]);
  const body = Buffer.alloc(h * w);
  let offset = 0;
  for (let i = 0; i < h; i++) {
    for (let j = 0; j < w; j++) {
      body.writeUInt8(data[i][j], offset);
      offset += 1;
    }
  }
  return Buffer.concat([head, body]);
}
