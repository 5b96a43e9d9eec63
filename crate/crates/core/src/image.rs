//! Dense C×H×W images in [0,1], canvas initialization, single-pixel
//! proposals, change ratios and 8-bit PNG serialization.

use std::io::Cursor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two values closer than this are considered the same pixel value.
pub const DIFF_TOLERANCE: f64 = 1e-9;

/// Starting canvas of an attack.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Black,
    White,
    UniformRandom,
}

impl InitMode {
    pub const ALL: [InitMode; 3] = [InitMode::Black, InitMode::White, InitMode::UniformRandom];

    pub fn name(self) -> &'static str {
        match self {
            InitMode::Black => "black",
            InitMode::White => "white",
            InitMode::UniformRandom => "uniform_random",
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "black" => Ok(InitMode::Black),
            "white" => Ok(InitMode::White),
            "uniform_random" | "random" => Ok(InitMode::UniformRandom),
            other => Err(Error::Validation(format!("unknown init mode `{other}`"))),
        }
    }
}

/// Channel-major image: element `(k, i, j)` lives at `k*H*W + i*W + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Write of value `value` at channel `channel`, row `row`, column `col`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelProposal {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub value: f32,
}

fn check_dims(channels: usize, height: usize, width: usize) -> Result<()> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidDimension {
            channels,
            height,
            width,
        });
    }
    Ok(())
}

fn check_value(v: f32) -> Result<()> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Value(v as f64))
    }
}

/// Builds the starting canvas. Only `UniformRandom` consumes `rng_seed`.
pub fn new_canvas(
    channels: usize,
    height: usize,
    width: usize,
    mode: InitMode,
    rng_seed: u64,
) -> Result<Image> {
    check_dims(channels, height, width)?;
    let len = channels * height * width;
    let data = match mode {
        InitMode::Black => vec![0.0; len],
        InitMode::White => vec![1.0; len],
        InitMode::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            (0..len).map(|_| rng.random::<f32>()).collect()
        }
    };
    Ok(Image {
        channels,
        height,
        width,
        data,
    })
}

impl Image {
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(channels, height, width)?;
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                expected: vec![channels * height * width],
                actual: vec![data.len()],
            });
        }
        for &v in &data {
            check_value(v)?;
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        new_canvas(channels, height, width, InitMode::Black, 0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[C, H, W]`
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index_of(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> Result<f32> {
        if channel >= self.channels || row >= self.height || col >= self.width {
            return Err(Error::Index(format!(
                "({channel}, {row}, {col}) in image {:?}",
                self.shape()
            )));
        }
        Ok(self.data[self.index_of(channel, row, col)])
    }

    pub fn check_proposal(&self, p: &PixelProposal) -> Result<()> {
        if p.channel >= self.channels || p.row >= self.height || p.col >= self.width {
            return Err(Error::Index(format!(
                "proposal (channel {}, row {}, col {}) outside image {:?}",
                p.channel,
                p.row,
                p.col,
                self.shape()
            )));
        }
        check_value(p.value)
    }

    /// Returns a copy with the single element named by `p` overwritten.
    pub fn apply_proposal(&self, p: &PixelProposal) -> Result<Image> {
        self.check_proposal(p)?;
        let mut out = self.clone();
        let idx = out.index_of(p.channel, p.row, p.col);
        out.data[idx] = p.value;
        Ok(out)
    }

    /// In-place write used by the attack loops; returns the previous value.
    /// Bounds are the caller's responsibility.
    pub(crate) fn write(&mut self, p: &PixelProposal) -> f32 {
        let idx = self.index_of(p.channel, p.row, p.col);
        std::mem::replace(&mut self.data[idx], p.value)
    }

    pub(crate) fn set_flat(&mut self, idx: usize, value: f32) {
        self.data[idx] = value;
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.shape().to_vec(),
                actual: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Fraction of spatial locations `(i, j)` where any channel differs by
    /// more than [`DIFF_TOLERANCE`].
    pub fn changed_location_ratio(&self, other: &Image) -> Result<f64> {
        self.same_shape(other)?;
        let plane = self.height * self.width;
        let changed = (0..plane)
            .filter(|&loc| {
                (0..self.channels).any(|k| {
                    let idx = k * plane + loc;
                    ((self.data[idx] as f64) - (other.data[idx] as f64)).abs() > DIFF_TOLERANCE
                })
            })
            .count();
        Ok(changed as f64 / plane as f64)
    }

    /// Maps each element to `round(v*255)/255`, the values a PNG round trip yields.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => {
                return Err(Error::UnsupportedFormat(format!(
                    "png encoding needs 1 or 3 channels, image has {c}"
                )))
            }
        };
        let plane = self.height * self.width;
        let mut bytes = Vec::with_capacity(self.data.len());
        for loc in 0..plane {
            for k in 0..self.channels {
                bytes.push(quantize(self.data[k * plane + loc]));
            }
        }
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            encoder.set_color(color);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder
                .write_header()
                .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
            writer
                .write_image_data(&bytes)
                .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::PngDecode(e.to_string()))?;
        let (color, depth) = reader.output_color_type();
        if depth != png::BitDepth::Eight {
            return Err(Error::UnsupportedFormat(format!("bit depth {depth:?}")));
        }
        let channels = match color {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::UnsupportedFormat(format!("color type {other:?}"))),
        };
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::PngDecode("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::PngDecode(e.to_string()))?;
        let (width, height) = (info.width as usize, info.height as usize);
        let plane = width * height;
        let mut data = vec![0.0f32; plane * channels];
        for row in 0..height {
            let line = &buf[row * info.line_size..][..width * channels];
            for col in 0..width {
                for k in 0..channels {
                    data[k * plane + row * width + col] = line[col * channels + k] as f32 / 255.0;
                }
            }
        }
        Image::from_vec(channels, height, width, data)
    }
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn black_canvas_is_all_zero() {
        let img = new_canvas(3, 224, 224, InitMode::Black, 5).unwrap();
        assert_eq!(img.data().len(), 3 * 224 * 224);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_canvas_is_all_one() {
        let img = new_canvas(1, 2, 2, InitMode::White, 0).unwrap();
        assert_eq!(img.data(), &[1.0; 4]);
    }

    #[test]
    fn random_canvas_is_seed_deterministic() {
        let a = new_canvas(1, 4, 4, InitMode::UniformRandom, 7).unwrap();
        let b = new_canvas(1, 4, 4, InitMode::UniformRandom, 7).unwrap();
        assert_eq!(a, b);
        let c = new_canvas(1, 4, 4, InitMode::UniformRandom, 8).unwrap();
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            new_canvas(0, 2, 2, InitMode::Black, 0),
            Err(Error::InvalidDimension { .. })
        ));
        assert!(matches!(
            new_canvas(1, 2, 0, InitMode::Black, 0),
            Err(Error::InvalidDimension { .. })
        ));
    }

    #[test]
    fn apply_proposal_single_write() {
        let img = Image::zeros(1, 2, 2).unwrap();
        let p = PixelProposal {
            row: 0,
            col: 0,
            channel: 0,
            value: 0.5,
        };
        let out = img.apply_proposal(&p).unwrap();
        assert_eq!(out.data(), &[0.5, 0.0, 0.0, 0.0]);
        assert_eq!(img.data(), &[0.0; 4], "input must not be modified");
    }

    #[test]
    fn apply_proposal_same_value_is_identity() {
        let img = new_canvas(3, 3, 3, InitMode::UniformRandom, 1).unwrap();
        let value = img.get(2, 1, 0).unwrap();
        let out = img
            .apply_proposal(&PixelProposal {
                row: 1,
                col: 0,
                channel: 2,
                value,
            })
            .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn two_proposals_both_present() {
        let img = Image::zeros(3, 4, 5).unwrap();
        let p1 = PixelProposal { row: 1, col: 2, channel: 0, value: 0.25 };
        let p2 = PixelProposal { row: 3, col: 4, channel: 2, value: 0.75 };
        let out = img.apply_proposal(&p1).unwrap().apply_proposal(&p2).unwrap();
        // exhaustive elementwise scan
        let mut diffs = Vec::new();
        for k in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let v = out.get(k, i, j).unwrap();
                    if v != 0.0 {
                        diffs.push((k, i, j, v));
                    }
                }
            }
        }
        assert_eq!(diffs, vec![(0, 1, 2, 0.25), (2, 3, 4, 0.75)]);
    }

    #[test]
    fn out_of_bounds_proposal_rejected() {
        let img = Image::zeros(1, 2, 2).unwrap();
        for p in [
            PixelProposal { row: 2, col: 0, channel: 0, value: 0.1 },
            PixelProposal { row: 0, col: 2, channel: 0, value: 0.1 },
            PixelProposal { row: 0, col: 0, channel: 1, value: 0.1 },
        ] {
            assert!(matches!(img.apply_proposal(&p), Err(Error::Index(_))));
        }
        let bad_value = PixelProposal { row: 0, col: 0, channel: 0, value: 1.5 };
        assert!(matches!(img.apply_proposal(&bad_value), Err(Error::Value(_))));
    }

    #[test]
    fn from_vec_validates() {
        assert!(Image::from_vec(1, 1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(Image::from_vec(1, 1, 2, vec![0.0, -0.1]).is_err());
        assert!(Image::from_vec(1, 1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn change_ratio_examples() {
        let a = Image::from_vec(1, 2, 2, vec![0.2, 0.3, 0.4, 0.6]).unwrap();
        assert_eq!(a.changed_location_ratio(&a).unwrap(), 0.0);
        let inv = Image::from_vec(1, 2, 2, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert_eq!(a.changed_location_ratio(&inv).unwrap(), 1.0);
        let one = Image::from_vec(1, 2, 2, vec![0.2, 0.3, 0.9, 0.6]).unwrap();
        assert_eq!(a.changed_location_ratio(&one).unwrap(), 0.25);
    }

    #[test]
    fn change_ratio_counts_locations_not_channels() {
        let a = Image::zeros(3, 2, 2).unwrap();
        let b = a
            .apply_proposal(&PixelProposal { row: 1, col: 1, channel: 0, value: 0.5 })
            .unwrap()
            .apply_proposal(&PixelProposal { row: 1, col: 1, channel: 2, value: 0.5 })
            .unwrap();
        assert_eq!(a.changed_location_ratio(&b).unwrap(), 0.25);
    }

    #[test]
    fn change_ratio_shape_mismatch() {
        let a = Image::zeros(1, 2, 2).unwrap();
        let b = Image::zeros(3, 2, 2).unwrap();
        assert!(matches!(a.changed_location_ratio(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn png_examples() {
        let zero = Image::zeros(1, 3, 2).unwrap();
        assert_eq!(Image::decode_png(&zero.encode_png().unwrap()).unwrap(), zero);

        let img = Image::from_vec(1, 1, 2, vec![1.0, 0.5]).unwrap();
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back.data(), &[1.0, 128.0 / 255.0]);
    }

    #[test]
    fn png_rgb_layout() {
        let img = new_canvas(3, 5, 4, InitMode::UniformRandom, 3).unwrap();
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn png_malformed_and_unsupported() {
        assert!(matches!(Image::decode_png(b"not a png"), Err(Error::PngDecode(_))));

        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            enc.write_header().unwrap().write_image_data(&[0, 1, 2, 3]).unwrap();
        }
        assert!(matches!(Image::decode_png(&out), Err(Error::UnsupportedFormat(_))));
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..=3, 1usize..=6, 1usize..=6)
            .prop_filter("png needs 1 or 3 channels", |(c, _, _)| *c != 2)
            .prop_flat_map(|(c, h, w)| {
                proptest::collection::vec(0.0f32..=1.0, c * h * w)
                    .prop_map(move |data| Image::from_vec(c, h, w, data).unwrap())
            })
    }

    proptest! {
        #[test]
        fn png_round_trip_is_projection(img in arb_image()) {
            let q = img.quantized();
            let once = Image::decode_png(&img.encode_png().unwrap()).unwrap();
            prop_assert_eq!(&once, &q);
            let twice = Image::decode_png(&q.encode_png().unwrap()).unwrap();
            prop_assert_eq!(twice, q);
        }

        #[test]
        fn change_ratio_symmetric_and_zero_iff_equal(a in arb_image(), seed in any::<u64>()) {
            let b = new_canvas(a.channels(), a.height(), a.width(), InitMode::UniformRandom, seed).unwrap();
            let ab = a.changed_location_ratio(&b).unwrap();
            prop_assert_eq!(ab, b.changed_location_ratio(&a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}
