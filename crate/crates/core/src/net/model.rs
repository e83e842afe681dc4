//! Forward and backward passes of the conditional restoration network.

use rayon::prelude::*;

use super::params::{
    conv_dec, conv_mam_a, conv_mam_b, ModelParams, CONV_HEAD_IMAGE, CONV_HEAD_MASK, DECODER_STAGES,
    ENCODER_LEVELS,
};
use super::tensor::*;
use crate::error::{Error, Result};
use crate::image::{Image, MaskPlane, Plane};
use crate::masking::{downsample_mask_nearest, Triplet};
use crate::metrics::{total_loss_grad, LossTerms, LossWeights, SimilarityConfig};

struct StageTape<T> {
    gate: Vec<T>,
    col_a: Vec<T>,
    act_a: Tensor<T>,
    col_b: Vec<T>,
    col_d: Vec<T>,
    out: Tensor<T>,
}

/// Intermediate activations retained for the backward pass.
pub struct Tape<T> {
    enc_cols: Vec<Vec<T>>,
    enc_out: Vec<Tensor<T>>,
    stages: Vec<StageTape<T>>,
    image: Tensor<T>,
    mask: Tensor<T>,
}

impl<T: Scalar> Tape<T> {
    pub fn image(&self) -> &Tensor<T> {
        &self.image
    }

    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }
}

fn gate_values<T: Scalar>(mask: &MaskPlane, h: usize, w: usize) -> Result<Vec<T>> {
    let m = downsample_mask_nearest(mask, h, w)?;
    Ok(m.data()
        .iter()
        .map(|&v| if v != 0 { T::one() } else { T::zero() })
        .collect())
}

/// Residual gate `f + φ(f, m) ⊙ m`; positions with a zero gate keep `f` as is.
fn gated_residual<T: Scalar>(f_prev: &Tensor<T>, branch: &Tensor<T>, gate: &[T]) -> Tensor<T> {
    let mut out = f_prev.clone();
    let n = f_prev.plane();
    for c in 0..f_prev.c {
        let dst = &mut out.data[c * n..(c + 1) * n];
        let src = branch.channel(c);
        for ((d, &b), &g) in dst.iter_mut().zip(src).zip(gate) {
            if g != T::zero() {
                *d += b * g;
            }
        }
    }
    out
}

struct MamOutput<T> {
    out: Tensor<T>,
    col_a: Vec<T>,
    act_a: Tensor<T>,
    col_b: Vec<T>,
}

fn mam_block<T: Scalar>(
    params: &ModelParams<T>,
    s: usize,
    f_prev: &Tensor<T>,
    gate: &[T],
) -> MamOutput<T> {
    let convs = params.arch.convs();
    let slope = T::of(params.arch.leaky_slope);
    let m = Tensor::from_vec(1, f_prev.h, f_prev.w, gate.to_vec());
    let u = f_prev.concat(&m);
    let (ia, ib) = (conv_mam_a(s), conv_mam_b(s));
    let (mut act_a, col_a) = conv_forward(&u, params.weight(ia), params.bias(ia), &convs[ia].geom);
    leaky_relu_inplace(&mut act_a, slope);
    let (branch, col_b) = conv_forward(&act_a, params.weight(ib), params.bias(ib), &convs[ib].geom);
    MamOutput {
        out: gated_residual(f_prev, &branch, gate),
        col_a,
        act_a,
        col_b,
    }
}

/// Mask attention module of decoder stage `stage` (0-based): the mask is
/// resampled to `f_prev`'s resolution and gates a residual branch.
pub fn mam_forward<T: Scalar>(
    params: &ModelParams<T>,
    stage: usize,
    f_prev: &Tensor<T>,
    mask: &MaskPlane,
) -> Result<Tensor<T>> {
    if stage >= DECODER_STAGES {
        return Err(Error::Precondition(format!("no decoder stage {stage}")));
    }
    let c = params.arch.widths[ENCODER_LEVELS - 1 - stage];
    let (h, w) = params.arch.stage_dims(stage);
    if (f_prev.c, f_prev.h, f_prev.w) != (c, h, w) {
        return Err(Error::shape(
            format!("{c}x{h}x{w}"),
            format!("{}x{}x{}", f_prev.c, f_prev.h, f_prev.w),
        ));
    }
    let gate = gate_values(mask, h, w)?;
    Ok(mam_block(params, stage, f_prev, &gate).out)
}

/// `I' ⊙ (1 − M) + I ⊙ M`: visible pixels are copied from the input.
pub fn compose(image: &Image, restored: &Image, mask: &MaskPlane) -> Result<Image> {
    image.ensure_same_shape(restored)?;
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::shape(
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let mut out = restored.clone();
    for c in 0..image.channels() {
        let src = image.channel(c);
        for ((o, &s), &m) in out.channel_mut(c).iter_mut().zip(src).zip(mask.data()) {
            if m != 0 {
                *o = s;
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> ModelParams<T> {
    fn check_input(&self, masked: &Image, mask: &MaskPlane) -> Result<()> {
        let a = &self.arch;
        if masked.shape() != (a.in_channels, a.height, a.width) {
            return Err(Error::shape(
                format!("{}x{}x{}", a.in_channels, a.height, a.width),
                format!("{:?}", masked.shape()),
            ));
        }
        if (mask.height(), mask.width()) != (a.height, a.width) {
            return Err(Error::shape(
                format!("{}x{}", a.height, a.width),
                format!("{}x{}", mask.height(), mask.width()),
            ));
        }
        Ok(())
    }

    fn input_tensor(&self, masked: &Image, mask: &MaskPlane) -> Tensor<T> {
        let mut data: Vec<T> = masked.data().iter().map(|&v| T::of(v)).collect();
        let mut c = masked.channels();
        if self.arch.mask_input {
            data.extend(mask.data().iter().map(|&v| T::of(v as f64)));
            c += 1;
        }
        Tensor::from_vec(c, masked.height(), masked.width(), data)
    }

    /// Runs the network and keeps everything the backward pass needs.
    pub fn forward_tape(&self, masked: &Image, mask: &MaskPlane) -> Result<Tape<T>> {
        self.check_input(masked, mask)?;
        let convs = self.arch.convs();
        let slope = T::of(self.arch.leaky_slope);

        let mut x = self.input_tensor(masked, mask);
        let mut enc_cols = Vec::with_capacity(ENCODER_LEVELS);
        let mut enc_out = Vec::with_capacity(ENCODER_LEVELS);
        for (l, spec) in convs.iter().enumerate().take(ENCODER_LEVELS) {
            let (mut y, col) = conv_forward(&x, self.weight(l), self.bias(l), &spec.geom);
            leaky_relu_inplace(&mut y, slope);
            enc_cols.push(col);
            enc_out.push(y.clone());
            x = y;
        }

        let mut f = x;
        let mut stages = Vec::with_capacity(DECODER_STAGES);
        for s in 0..DECODER_STAGES {
            let gate = gate_values(mask, f.h, f.w)?;
            let mam = mam_block(self, s, &f, &gate);
            let cat = upsample2(&mam.out).concat(&enc_out[ENCODER_LEVELS - 2 - s]);
            let id = conv_dec(s);
            let (mut d, col_d) =
                conv_forward(&cat, self.weight(id), self.bias(id), &convs[id].geom);
            leaky_relu_inplace(&mut d, slope);
            f = d.clone();
            stages.push(StageTape {
                gate,
                col_a: mam.col_a,
                act_a: mam.act_a,
                col_b: mam.col_b,
                col_d,
                out: d,
            });
        }

        let (mut image, _) = conv_forward(
            &f,
            self.weight(CONV_HEAD_IMAGE),
            self.bias(CONV_HEAD_IMAGE),
            &convs[CONV_HEAD_IMAGE].geom,
        );
        sigmoid_inplace(&mut image);
        let (mut mask_out, _) = conv_forward(
            &f,
            self.weight(CONV_HEAD_MASK),
            self.bias(CONV_HEAD_MASK),
            &convs[CONV_HEAD_MASK].geom,
        );
        sigmoid_inplace(&mut mask_out);

        Ok(Tape {
            enc_cols,
            enc_out,
            stages,
            image,
            mask: mask_out,
        })
    }

    /// Restored image `I'` and mask prediction `M'`, both in `[0, 1]`.
    pub fn forward(&self, masked: &Image, mask: &MaskPlane) -> Result<(Image, Plane)> {
        let tape = self.forward_tape(masked, mask)?;
        Ok(tape_outputs(&tape))
    }

    /// Backpropagates output gradients through a recorded pass,
    /// accumulating parameter gradients into `grads`.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        d_image: &[T],
        d_mask: &[T],
        grads: &mut ModelParams<T>,
    ) {
        let convs = self.arch.convs();
        let slope = T::of(self.arch.leaky_slope);
        let last = &tape.stages[DECODER_STAGES - 1].out;

        let mut dzi = d_image.to_vec();
        sigmoid_backward_inplace(&mut dzi, &tape.image.data);
        let mut dzm = d_mask.to_vec();
        sigmoid_backward_inplace(&mut dzm, &tape.mask.data);

        let mut df = {
            let (dw, db) = grads.weight_bias_mut(CONV_HEAD_IMAGE);
            let g = &convs[CONV_HEAD_IMAGE].geom;
            conv_backward(
                &dzi,
                &last.data,
                self.weight(CONV_HEAD_IMAGE),
                g,
                dw,
                db,
                true,
            )
            .unwrap()
        };
        {
            let (dw, db) = grads.weight_bias_mut(CONV_HEAD_MASK);
            let g = &convs[CONV_HEAD_MASK].geom;
            let dm = conv_backward(
                &dzm,
                &last.data,
                self.weight(CONV_HEAD_MASK),
                g,
                dw,
                db,
                true,
            )
            .unwrap();
            df.iter_mut().zip(dm).for_each(|(a, b)| *a += b);
        }
        let mut df = Tensor::from_vec(last.c, last.h, last.w, df);

        let mut d_enc: Vec<Tensor<T>> = tape
            .enc_out
            .iter()
            .map(|e| Tensor::zeros(e.c, e.h, e.w))
            .collect();

        for s in (0..DECODER_STAGES).rev() {
            let st = &tape.stages[s];
            leaky_relu_backward_inplace(&mut df.data, &st.out.data, slope);
            let id = conv_dec(s);
            let gd = &convs[id].geom;
            let dcat = {
                let (dw, db) = grads.weight_bias_mut(id);
                conv_backward(&df.data, &st.col_d, self.weight(id), gd, dw, db, true).unwrap()
            };
            let c_up = st.act_a.c;
            let (dup, dskip) = Tensor::from_vec(gd.cin, gd.h, gd.w, dcat).split(c_up);
            d_enc[ENCODER_LEVELS - 2 - s].add_assign(&dskip);
            let dg = upsample2_backward(&dup);

            // Mask attention: identity path plus gated branch.
            let mut df_prev = dg.clone();
            let mut dbranch = dg;
            let n = dbranch.plane();
            for c in 0..dbranch.c {
                for (v, &g) in dbranch.data[c * n..(c + 1) * n].iter_mut().zip(&st.gate) {
                    *v = if g != T::zero() { *v * g } else { T::zero() };
                }
            }
            let (ia, ib) = (conv_mam_a(s), conv_mam_b(s));
            let mut dact = {
                let (dw, db) = grads.weight_bias_mut(ib);
                conv_backward(
                    &dbranch.data,
                    &st.col_b,
                    self.weight(ib),
                    &convs[ib].geom,
                    dw,
                    db,
                    true,
                )
                .unwrap()
            };
            leaky_relu_backward_inplace(&mut dact, &st.act_a.data, slope);
            let du = {
                let (dw, db) = grads.weight_bias_mut(ia);
                conv_backward(
                    &dact,
                    &st.col_a,
                    self.weight(ia),
                    &convs[ia].geom,
                    dw,
                    db,
                    true,
                )
                .unwrap()
            };
            for (a, &b) in df_prev.data.iter_mut().zip(&du[..c_up * n]) {
                *a += b;
            }
            df = df_prev;
        }

        d_enc[ENCODER_LEVELS - 1].add_assign(&df);
        for l in (0..ENCODER_LEVELS).rev() {
            let mut dz = std::mem::replace(&mut d_enc[l], Tensor::zeros(0, 0, 0));
            leaky_relu_backward_inplace(&mut dz.data, &tape.enc_out[l].data, slope);
            let (dw, db) = grads.weight_bias_mut(l);
            let dx = conv_backward(
                &dz.data,
                &tape.enc_cols[l],
                self.weight(l),
                &convs[l].geom,
                dw,
                db,
                l > 0,
            );
            if let Some(dx) = dx {
                for (a, b) in d_enc[l - 1].data.iter_mut().zip(dx) {
                    *a += b;
                }
            }
        }
    }
}

fn tape_outputs<T: Scalar>(tape: &Tape<T>) -> (Image, Plane) {
    let t = &tape.image;
    let image = Image::from_vec(t.c, t.h, t.w, t.data.iter().map(|v| v.as_f64()).collect())
        .expect("head shape");
    let m = &tape.mask;
    let mask =
        Plane::from_vec(m.h, m.w, m.data.iter().map(|v| v.as_f64()).collect()).expect("head shape");
    (image, mask)
}

/// Loss of a batch: per-term sums over items and the item count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub sum: LossTerms,
    pub items: usize,
}

impl BatchLoss {
    pub fn mean(&self) -> LossTerms {
        self.sum.scaled(1.0 / self.items.max(1) as f64)
    }
}

/// Loss of one training triplet and its gradients with respect to the two
/// head outputs. Image terms see the composed reconstruction, so only
/// masked pixels of `I'` receive gradient.
pub fn triplet_loss_grad(
    restored: &Image,
    mask_pred: &Plane,
    triplet: &Triplet,
    weights: &LossWeights,
    cfg: &SimilarityConfig,
) -> Result<(LossTerms, Image, Plane)> {
    let composed = compose(&triplet.image, restored, &triplet.mask)?;
    let (terms, mut d_composed, d_mask) = total_loss_grad(
        &triplet.image,
        &composed,
        &triplet.mask,
        mask_pred,
        weights,
        cfg,
    )?;
    let n = d_composed.pixels();
    for c in 0..d_composed.channels() {
        let ch = &mut d_composed.data_mut()[c * n..(c + 1) * n];
        for (g, &m) in ch.iter_mut().zip(triplet.mask.data()) {
            if m != 0 {
                *g = 0.0;
            }
        }
    }
    Ok((terms, d_composed, d_mask))
}

/// Mean batch loss and its gradient with respect to every parameter.
/// Items are processed in parallel; their gradients are summed in batch
/// order so the result does not depend on scheduling.
pub fn batch_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[Triplet],
    weights: &LossWeights,
    cfg: &SimilarityConfig,
) -> Result<(BatchLoss, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let per_item: Vec<Result<(LossTerms, ModelParams<T>)>> = batch
        .par_iter()
        .map(|t| {
            let tape = params.forward_tape(&t.masked, &t.mask)?;
            let (restored, mask_pred) = tape_outputs(&tape);
            let (terms, d_img, d_mask) = triplet_loss_grad(&restored, &mask_pred, t, weights, cfg)?;
            let d_img: Vec<T> = d_img.data().iter().map(|&v| T::of(v * scale)).collect();
            let d_mask: Vec<T> = d_mask.data().iter().map(|&v| T::of(v * scale)).collect();
            let mut g = params.zeros_like();
            params.backward(&tape, &d_img, &d_mask, &mut g);
            Ok((terms, g))
        })
        .collect();

    let mut loss = BatchLoss::default();
    let mut grads: Option<ModelParams<T>> = None;
    for item in per_item {
        let (terms, g) = item?;
        loss.sum.add(&terms);
        loss.items += 1;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.accumulate(&g),
        }
    }
    Ok((loss, grads.expect("non-empty batch")))
}

/// Scalar mean batch loss without gradients.
pub fn batch_loss<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[Triplet],
    weights: &LossWeights,
    cfg: &SimilarityConfig,
) -> Result<BatchLoss> {
    let mut loss = BatchLoss::default();
    for t in batch {
        let (restored, mask_pred) = params.forward(&t.masked, &t.mask)?;
        let composed = compose(&t.image, &restored, &t.mask)?;
        let terms =
            crate::metrics::total_loss(&t.image, &composed, &t.mask, &mask_pred, weights, cfg)?;
        loss.sum.add(&terms);
        loss.items += 1;
    }
    Ok(loss)
}
