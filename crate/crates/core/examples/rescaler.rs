//! Quantize one rescale factor at several widths and apply it to an accumulator.

use rescale_lab::qcore::{decompose_float, multiply_by_quantized_multiplier, quantize_rescaler};

fn main() -> rescale_lab::Result<()> {
    let m = 0.0072_f64;
    let acc = 14_321;
    let d = decompose_float(m)?;
    println!("M = {m} = (1 + {:.6}) * 2^{}", d.fraction, d.exponent);
    println!("exact M * acc = {:.4}", m * acc as f64);
    println!("{:>3} {:>11} {:>3} {:>14} {:>10}", "k", "m", "s", "M_q", "rescaled");
    for k in [32, 16, 8, 6, 4, 3, 2] {
        let r = quantize_rescaler(m, k)?;
        println!(
            "{k:>3} {:>11} {:>3} {:>14.10} {:>10}",
            r.m,
            r.s,
            r.quantized(),
            multiply_by_quantized_multiplier(acc, &r)
        );
    }
    Ok(())
}
