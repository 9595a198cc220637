//! Times one forward/backward pass of the default model on a short crop.

use std::time::Instant;

use srcorrnet::mixsim::DatasetSpec;
use srcorrnet::model::{Mode, ModelConfig, ModelInput, SrCorrNet};
use srcorrnet::nn::{Graph, ParamStore};
use srcorrnet::signal::Stft;

fn main() -> srcorrnet::Result<()> {
    let secs: f64 = std::env::args().nth(1).map_or(0.5, |s| s.parse().unwrap());
    let cfg = ModelConfig::default();
    let mut store = ParamStore::<f32>::new(0);
    let net = SrCorrNet::build(&cfg, &mut store)?;
    println!("parameters: {}", store.num_scalars());
    let spec = DatasetSpec {
        duration_s: secs,
        ..DatasetSpec::default()
    };
    let sample = spec.generate(0)?;
    let stft = Stft::new(cfg.stft)?;
    let input = ModelInput::<f32>::from_waveform(&cfg, &stft, &sample.mixture)?;
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::new().with_profiling();
        let out = net.forward(&mut g, &store, &input, Some(2), Mode::Train)?;
        let t1 = Instant::now();
        let seeds: Vec<_> = out
            .stages
            .iter()
            .map(|&v| (v, vec![1e-3f32; g.value(v).numel()]))
            .collect();
        let grads = g.backward_with(&seeds)?;
        grads.accumulate(&g, &mut store);
        let t2 = Instant::now();
        println!(
            "frames {} nodes {} forward {:.3}s backward {:.3}s",
            input.features.shape()[0],
            g.len(),
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64()
        );
        if std::env::var_os("PROFILE").is_some() {
            let mut e = g.profile().unwrap().entries;
            e.sort_by(|a, b| (b.1 + b.2).total_cmp(&(a.1 + a.2)));
            for (name, f, b, n) in e {
                println!("  {name:<16} fwd {f:.3} bwd {b:.3} x{n}");
            }
        }
    }
    Ok(())
}
