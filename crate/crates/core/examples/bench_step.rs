//! Wall time of the integrator per 1000 steps for a few grid, noise and tangent sizes.

use std::time::Instant;

use rdspde::coefficients::cubic_default;
use rdspde::flows::{simulate, FlowSpec, SchemeConfig};
use rdspde::noise::NoiseStream;
use rdspde::spectral::Grid;

fn main() {
    let dt = 1e-3;
    for (n, m, tangents) in [(32usize, 8usize, 0usize), (64, 16, 0), (64, 16, 1), (64, 16, 16), (64, 64, 0)] {
        let g = Grid::new(n).unwrap();
        let model = cubic_default(g, m).unwrap();
        let x = g.mode(1).unwrap();
        let cfg = SchemeConfig::new(dt, 1.0).unwrap();
        let spec = FlowSpec::tangents(vec![x.clone(); tangents]);
        let reps = 20;
        let t0 = Instant::now();
        for i in 0..reps {
            let s = NoiseStream::new(1, i, m, dt).unwrap();
            simulate(&model, &x, &spec, &cfg, &s, |_| {}).unwrap();
        }
        let ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
        println!("N={n} M={m} tangents={tangents}: {ms:.3} ms per 1000 steps");
    }
}
