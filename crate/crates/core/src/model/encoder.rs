use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{bind, locate, Block, Linear, Norm};
use super::{EncoderConfig, Image};
use crate::error::{Error, Result};
use crate::tensor::{GroupKind, ParameterGroup, Scalar, Tape, Tensor};

/// Patch-embedding transformer with bidirectional attention. Randomly
/// initialised from `config.seed` and never trained.
#[derive(Clone, Debug)]
pub struct VisualEncoder<S: Scalar = f64> {
    config: EncoderConfig,
    params: ParameterGroup<S>,
    patch: Linear,
    pos: usize,
    blocks: Vec<Block>,
    ln_f: Norm,
}

impl<S: Scalar> VisualEncoder<S> {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut g = ParameterGroup::new(GroupKind::VisualEncoder);
        let (c, n) = (config.dim, config.num_patches());
        let patch = Linear::init(&mut g, "patch", config.patch_len(), c, 1.0, &mut rng)?;
        let pos = g.push("pos", super::layers::normal(&mut rng, vec![n, c], 0.1))?;
        let blocks = (0..config.layers)
            .map(|i| {
                Block::init(
                    &mut g,
                    &format!("blocks.{i}"),
                    c,
                    4 * c,
                    config.heads,
                    config.layers,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let ln_f = Norm::init(&mut g, "ln_f", c)?;
        Ok(VisualEncoder {
            config: config.clone(),
            params: g,
            patch,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Rebuilds an encoder around stored parameters.
    pub fn from_params(config: &EncoderConfig, params: ParameterGroup<S>) -> Result<Self> {
        config.validate()?;
        if params.kind() != GroupKind::VisualEncoder {
            return Err(Error::Checkpoint(format!(
                "expected visual_encoder group, got {}",
                params.kind()
            )));
        }
        let (c, n) = (config.dim, config.num_patches());
        let patch = Linear::locate(&params, "patch", config.patch_len(), c)?;
        let pos = locate(&params, "pos")?;
        super::layers::expect_shape(&params, pos, &[n, c])?;
        let blocks = (0..config.layers)
            .map(|i| Block::locate(&params, &format!("blocks.{i}"), c, 4 * c, config.heads))
            .collect::<Result<_>>()?;
        let ln_f = Norm::locate(&params, "ln_f", c)?;
        if params.trainable() {
            return Err(Error::Contract(
                "the visual encoder is always frozen".into(),
            ));
        }
        Ok(VisualEncoder {
            config: config.clone(),
            params,
            patch,
            pos,
            blocks,
            ln_f,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterGroup<S> {
        &self.params
    }

    /// Cuts an image into `N_p` row-major patches of `S_p * S_p * 3` values.
    pub fn patchify(&self, image: &Image) -> Result<Tensor<S>> {
        let (h, p) = (self.config.image_size, self.config.patch_size);
        if image.height() != h || image.width() != h {
            return Err(Error::dim(
                "encode_image",
                &[image.height(), image.width()],
                &[h, h],
            ));
        }
        let side = h / p;
        let len = self.config.patch_len();
        let mut out = Vec::with_capacity(side * side * len);
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    let row = (py * p + y) * h + px * p;
                    out.extend(
                        image.pixels()[row * 3..(row + p) * 3]
                            .iter()
                            .map(|&v| S::lit(v)),
                    );
                }
            }
        }
        Tensor::new(vec![side * side, len], out)
    }

    /// Patch features `Z_v`, `[N_p, C]`.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor<S>> {
        Ok(self
            .encode_batch(std::slice::from_ref(image))?
            .pop()
            .expect("one image in, one out"))
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Vec<Tensor<S>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.config.num_patches();
        let mut rows = Vec::with_capacity(images.len() * n * self.config.patch_len());
        for img in images {
            rows.extend_from_slice(self.patchify(img)?.data());
        }
        let b = images.len();
        let mut tape = Tape::no_grad();
        let p = bind(&mut tape, &self.params);
        let x = tape.constant(Tensor::new(vec![b * n, self.config.patch_len()], rows)?);
        let mut x = self.patch.apply(&mut tape, &p, x)?;
        let pos = tape.gather_rows(p[self.pos], &(0..b).flat_map(|_| 0..n).collect::<Vec<_>>())?;
        x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.apply(&mut tape, &p, x, b, n, false)?;
        }
        let x = self.ln_f.apply(&mut tape, &p, x)?;
        let c = self.config.dim;
        Ok(tape
            .data(x)
            .chunks(n * c)
            .map(|d| Tensor::new(vec![n, c], d.to_vec()).expect("chunk is n x c"))
            .collect())
    }
}
