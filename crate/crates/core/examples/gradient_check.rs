//! Backpropagation through the unrolled inference loop, compared with
//! central finite differences for every parameter entry.
//!
//! cargo run --release --example gradient_check

use fond::dynamics::{ModelKind, Sampler};
use fond::learning::{backward, unroll, BpttOptions};
use fond::model::{init_params, DecoderKind, GenerativeParams, LatentFamily};
use fond::numerics::{Purpose, RngStream, Tensor};
use rand_distr::{Distribution, StandardNormal};

fn check(name: &str, kind: ModelKind, params: &GenerativeParams, x: &Tensor, opts: &BpttOptions) -> fond::Result<()> {
    let tape = unroll(x, params, kind, opts)?;
    let grads = backward(&tape, params)?;
    let loss = |p: &GenerativeParams| unroll(x, p, kind, opts).map(|t| t.total());
    let h = 1e-6;
    println!("{name}: loss {:.4}", tape.total());
    for (ti, (tname, g)) in grads.names().iter().zip(&grads.tensors).enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let (mut up, mut down) = (params.clone(), params.clone());
            up.tensors_mut()[ti].data_mut()[i] += h;
            down.tensors_mut()[ti].data_mut()[i] -= h;
            let fd = (loss(&up)? - loss(&down)?) / (2.0 * h);
            let an = g.data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
        println!("  {tname:<12} {:>4} entries, max relative error {worst:.2e}", g.len());
    }
    Ok(())
}

fn main() -> fond::Result<()> {
    let (m, k, t) = (8, 4, 3);
    let mut rng = RngStream::for_step(11, 0, 0, Purpose::Init);
    let mut x = Tensor::zeros(&[3, m]);
    for v in x.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let gauss = init_params(m, k, DecoderKind::Linear, LatentFamily::Gaussian, &mut rng)?;
    check("iG-VAE, frozen noise", ModelKind::Igvae, &gauss, &x, &BpttOptions::new(t, 1.5, Sampler::keyed(1)))?;
    let pois = init_params(m, k, DecoderKind::Linear, LatentFamily::Poisson, &mut rng)?;
    check("iP-VAE, rates in place of spikes", ModelKind::Ipvae, &pois, &x, &BpttOptions::new(t, 1.5, Sampler::Mean))?;
    Ok(())
}
