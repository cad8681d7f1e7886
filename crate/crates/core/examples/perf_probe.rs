use ghostsim::field::{Grid2D, SpeckleGenerator, SpeckleMethod, SpeckleSpec};
use ghostsim::optics::{PropagationSpec, Propagator};
use std::time::Instant;

fn main() {
    for n in [512usize, 768, 1024] {
        let g = Grid2D::new(n, n, 10e-6, 10e-6, 532e-9).unwrap();
        let spec = SpeckleSpec::new(80e-6, 1.0, 1e-3, SpeckleMethod::SpectralSynthesis).unwrap();
        let generator = SpeckleGenerator::new(g, spec).unwrap();
        let prop = Propagator::new(g, PropagationSpec::new(0.1).unwrap()).unwrap();
        let mut ws = generator.workspace();
        let reps = 20;
        let t0 = Instant::now();
        let mut sink = 0.0;
        for k in 0..reps {
            let f = generator.generate(k, 1, &mut ws);
            let p = prop.apply(&f, &mut ws).unwrap();
            sink += p.samples()[0].re;
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        println!("{n}x{n}: gen+propagate = {:.2} ms/realization (sink {sink:.3})", dt * 1e3);
    }
}
