use super::{AutoencoderModel, Conv, DoubleConv, DoubleConvTrace};
use crate::error::Result;
use crate::tensor::{self, Tensor};

fn conv_backward(conv: &Conv, input: &Tensor, grad_out: &Tensor, into: &mut Conv) -> Result<Tensor> {
    let g = tensor::conv2d_backward(input, &conv.weight, grad_out, &conv.spec)?;
    into.weight = g.kernels;
    if let Some(b) = into.bias.as_mut() {
        *b = g.bias;
    }
    Ok(g.input)
}

fn double_conv_backward(
    block: &DoubleConv,
    trace: &DoubleConvTrace,
    grad_out: &Tensor,
    into: &mut DoubleConv,
) -> Result<Tensor> {
    let g = tensor::relu_backward(grad_out, &trace.pre2)?;
    let g = conv_backward(&block.second, &trace.act1, &g, &mut into.second)?;
    let g = tensor::relu_backward(&g, &trace.pre1)?;
    conv_backward(&block.first, &trace.input, &g, &mut into.first)
}

impl AutoencoderModel {
    /// Reconstruction loss `mean((F(input) - target)^2)` and its gradient
    /// with respect to every parameter, returned as a model-shaped value.
    pub fn loss_and_gradients(&self, input: &Tensor, target: &Tensor) -> Result<(f64, AutoencoderModel)> {
        let trace = self.forward_trace(input)?;
        let loss = tensor::mse(&trace.output, target)?;
        let n = target.len() as f32;
        let grad_out = Tensor::new(
            target.shape().to_vec(),
            trace
                .output
                .data()
                .iter()
                .zip(target.data())
                .map(|(&o, &t)| 2.0 * (o - t) / n)
                .collect(),
        )?;

        let mut grads = self.zeros_like();
        let j = self.config.levels;
        let last = trace.decoders.last().map(|d| &d.convs.out).unwrap_or(&trace.bottleneck.out);
        let mut g = conv_backward(&self.head, last, &grad_out, &mut grads.head)?;

        // Gradient reaching each encoder output through its skip connection.
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; j];
        for idx in (0..j).rev() {
            let block = &self.decoder[idx];
            let t = &trace.decoders[idx];
            let g_merged = double_conv_backward(&block.convs, &t.convs, &g, &mut grads.decoder[idx].convs)?;
            let (g_skip, g_up) = tensor::split_channels(&g_merged, t.skip_channels)?;
            skip_grads[j - 1 - idx] = Some(g_skip);
            let g_upsampled = conv_backward(&block.up, &t.upsampled, &g_up, &mut grads.decoder[idx].up)?;
            g = tensor::upsample2_backward(&g_upsampled)?;
        }

        g = double_conv_backward(&self.bottleneck, &trace.bottleneck, &g, &mut grads.bottleneck)?;
        for level in (0..j).rev() {
            let mut g_e = tensor::maxpool2_backward(&g, &trace.pools[level])?;
            if let Some(s) = &skip_grads[level] {
                g_e.axpy(1.0, s)?;
            }
            g = double_conv_backward(&self.encoder[level], &trace.encoders[level], &g_e, &mut grads.encoder[level])?;
        }
        Ok((loss, grads))
    }
}
