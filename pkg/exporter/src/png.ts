import fs from 'fs'
import { PNG } from 'pngjs'

export interface RgbImage {
  width: number
  height: number
  /** row-major RGB, 3 bytes per pixel */
  pixels: Uint8Array
}

export function readRgbPng(filePath: string): RgbImage {
  const png = PNG.sync.read(fs.readFileSync(filePath))
  const pixels = new Uint8Array(png.width * png.height * 3)
  for (let i = 0, j = 0; i < png.data.length; i += 4, j += 3) {
    pixels[j] = png.data[i]
    pixels[j + 1] = png.data[i + 1]
    pixels[j + 2] = png.data[i + 2]
  }
  return { width: png.width, height: png.height, pixels }
}

export function writeRgbPng(image: RgbImage, filePath: string): void {
  const png = new PNG({ width: image.width, height: image.height })
  for (let i = 0, j = 0; j < image.pixels.length; i += 4, j += 3) {
    png.data[i] = image.pixels[j]
    png.data[i + 1] = image.pixels[j + 1]
    png.data[i + 2] = image.pixels[j + 2]
    png.data[i + 3] = 255
  }
  fs.writeFileSync(filePath, PNG.sync.write(png))
}
