//! Rescale error decomposition, its bound, the smallest safe width, and a
//! per-channel report on a random model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rescale_lab::arch::{desk_cnn_v1, random_quantized_model};
use rescale_lab::cli::random_input_batch;
use rescale_lab::errmodel::{analyze_model, min_safe_bitwidth, rescale_error_bound, rescale_error_decompose};
use rescale_lab::qcore::quantize_rescaler;

fn main() -> rescale_lab::Result<()> {
    let (m, a_q, s_y) = (0.1, 1000, 0.01);
    for k in [2, 4, 8, 16] {
        let r = quantize_rescaler(m, k)?;
        let e = rescale_error_decompose(a_q, m, &r, s_y);
        println!(
            "k={k:>2}: y_q={:>3} eps_r={:+.5} (mismatch {:+.5}, rounding {:+.5}) bound {:.5}",
            e.rescaled,
            e.eps_r,
            e.mismatch,
            s_y * e.delta_r,
            rescale_error_bound(m, &r, s_y, a_q)
        );
    }
    let safe = min_safe_bitwidth(m, 10_000)?;
    println!(
        "smallest safe width for M={m}, max|acc|=10000: k={} (attained: {})",
        safe.bits, safe.attained
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = random_quantized_model(&desk_cnn_v1(), 32, &mut rng)?;
    let probes = vec![random_input_batch(&model, 8, &mut rng)?];
    for k in [8, 3] {
        let reports = analyze_model(&model, &probes, k)?;
        let unsafe_channels: Vec<String> = reports
            .iter()
            .map(|r| {
                format!(
                    "layer {}: {}/{}",
                    r.layer,
                    r.channels.iter().filter(|c| !c.safe).count(),
                    r.channels.len()
                )
            })
            .collect();
        println!("k={k}: unsafe channels {}", unsafe_channels.join(", "));
    }
    Ok(())
}
