//! One neuron population, two views: membrane-potential updates in log
//! space and the equivalent multiplicative rate update with lateral
//! suppression through the dictionary Gram matrix.
//!
//! cargo run --release --example rate_dynamics

use fond::dynamics::{ipvae_step, rate_step, InferenceState, Mode, ModelKind, Sampler};
use fond::model::{decode, init_params, DecoderKind, LatentFamily};
use fond::numerics::{Purpose, RngStream, Tensor};

fn main() -> fond::Result<()> {
    let (m, k) = (16, 6);
    let mut rng = RngStream::for_step(3, 0, 0, Purpose::Init);
    let params = init_params(m, k, DecoderKind::Linear, LatentFamily::Poisson, &mut rng)?;

    // an input made of two dictionary elements
    let mut code = Tensor::zeros(&[1, k]);
    code.data_mut()[1] = 2.0;
    code.data_mut()[4] = 1.0;
    let x = decode(&params, &code)?;

    let gram = params.gram().expect("linear dictionary");
    println!("lateral weights ΦᵀΦ (row 1): {:.3?}", gram.row(1));

    let sampler = Sampler::keyed(7);
    let mut state = InferenceState::initial(&params, ModelKind::Ipvae, 1)?;
    println!("\n{:>3}  {:<44} {:>10}", "t", "rates", "max |Δ|");
    for t in 0..12 {
        let r = state.rates().expect("Poisson state");
        let next = ipvae_step(&state, &x, &params, Mode::Online, &sampler)?;
        let via_rates = rate_step(&r, &next.z, &x, &params)?;
        let via_log = next.rates().expect("Poisson state");
        let diff = via_rates.sub(&via_log)?.max_abs();
        let shown: Vec<String> = via_log.data().iter().map(|v| format!("{v:.2}")).collect();
        println!("{t:>3}  {:<44} {diff:>10.1e}", shown.join(" "));
        state = next;
    }
    Ok(())
}
