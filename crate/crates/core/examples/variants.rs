use lsnet::model::{count_macs, ModelSpec};

fn main() {
    for (spec, p, f) in [
        (ModelSpec::lsnet_t(), 11.4, 0.3),
        (ModelSpec::lsnet_s(), 16.1, 0.5),
        (ModelSpec::lsnet_b(), 23.2, 1.3),
    ] {
        let r = count_macs(&spec, 224, 224).unwrap();
        let pm = r.total_params as f64 / 1e6;
        let gm = r.total_macs as f64 / 1e9;
        println!(
            "{}: params {:.3}M ({:+.1}%), MACs {:.3}G ({:+.1}%), 2xMACs {:.3}G",
            spec.name,
            pm,
            (pm / p - 1.0) * 100.0,
            gm,
            (gm / f - 1.0) * 100.0,
            2.0 * gm
        );
    }
}
