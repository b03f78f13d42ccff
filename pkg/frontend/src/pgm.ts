// Binary PGM ("P5") parsing, used to draw served item images onto a canvas.

export interface PgmImage {
  width: number;
  height: number;
  pixels: Uint8ClampedArray; // row-major grayscale
}

export function parsePgm(bytes: Uint8Array): PgmImage {
  if (bytes[0] !== 0x50 || bytes[1] !== 0x35) {
    throw new Error('not a binary PGM (P5) image');
  }
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) {
      // comment runs to end of line
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    if (start === pos) throw new Error('malformed PGM header');
    fields.push(parseInt(textOf(bytes, start, pos), 10));
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  if (!(maxval > 0 && maxval <= 255)) throw new Error('only 8-bit PGM supported');
  if (bytes.length - pos < width * height) throw new Error('truncated PGM data');
  return {
    width,
    height,
    pixels: new Uint8ClampedArray(bytes.buffer, bytes.byteOffset + pos, width * height),
  };
}

export function drawPgm(canvas: HTMLCanvasElement, image: PgmImage, scale = 4): void {
  canvas.width = image.width * scale;
  canvas.height = image.height * scale;
  const ctx = canvas.getContext('2d');
  if (!ctx) return;
  const rgba = new Uint8ClampedArray(image.width * image.height * 4);
  for (let i = 0; i < image.pixels.length; i++) {
    const v = image.pixels[i];
    rgba[4 * i] = v;
    rgba[4 * i + 1] = v;
    rgba[4 * i + 2] = v;
    rgba[4 * i + 3] = 255;
  }
  const data = new ImageData(rgba, image.width, image.height);
  ctx.imageSmoothingEnabled = false;
  // draw at native size, then scale up with nearest-neighbor
  ctx.putImageData(data, 0, 0);
  ctx.drawImage(canvas, 0, 0, image.width, image.height, 0, 0, canvas.width, canvas.height);
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
}

function textOf(bytes: Uint8Array, start: number, end: number): string {
  let out = '';
  for (let i = start; i < end; i++) out += String.fromCharCode(bytes[i]);
  return out;
}
