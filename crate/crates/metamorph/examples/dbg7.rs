use metamorph::scene::Scene;
use metamorph::stability_opt::*;
use metamorph::spring_placement::*;
use metamorph::spring_energy::Spring;

fn main() {
    let scene = Scene::load(std::path::Path::new("/tmp/m6g0/scene.json")).unwrap();
    let mut structure = scene.structure.clone();
    let forms = &scene.forms;
    let opts = OptimizerOptions { k0: 50.0, ..Default::default() };
    let tols = resolve_tolerances(&structure, &opts);
    println!("margin {:.3e} rtol {:.3e}", tols.eig_margin, tols.residual_tol);
    // Manually add the good symmetric spring (2,4) found earlier plus a few
    // mid-bar non-adjacent springs; see if the optimizer alone can stabilize.
    let pairs = [(2usize,4usize),(1,3),(0,2),(3,5),(1,4)];
    for (i,(a,b)) in pairs.iter().enumerate() {
        let p = place_min_energy_spring(&structure, forms, *a, *b).unwrap();
        println!("spring {i} ({a},{b}): s {:.3} t {:.3} rest {:.2} mismatch {:.2e}", p.s, p.t, p.rest_length, p.length_mismatch);
        structure.springs.push(Spring{ id: i, body_1: *a, body_2: *b,
            u1_local: structure.bars[*a].point_on_line(p.s),
            u2_local: structure.bars[*b].point_on_line(p.t),
            k: opts.k0, l: p.rest_length, l0: p.rest_length, z_layer: None });
    }
    let design = DesignVector::from_springs(&structure.springs, opts.k0);
    let (r0, e0) = state(&structure, forms, &design);
    println!("before: residuals {:?} min_eigs {:?}", r0, e0);
    let t0 = std::time::Instant::now();
    let out = optimize_design(&structure, forms, &design, &opts, None).unwrap();
    println!("optimize: converged={} outer={} t={:.2}s", out.report.converged, out.report.iterations, t0.elapsed().as_secs_f64());
    for f in &out.report.forms {
        println!("  {}: r {:.3e} eig0 {:.3e}", f.label, f.residual_norm, f.eigenvalues[0]);
    }
    println!("design: {:?}", out.design.params);
}

fn state(s: &metamorph::rigidbody::Structure, forms: &[metamorph::rigidbody::Form], d: &DesignVector) -> (Vec<String>, Vec<String>) {
    let mut rs = vec![]; let mut es = vec![];
    for f in forms {
        rs.push(format!("{:.3e}", first_order_residual(s, f, &d.params).unwrap().norm()));
        let h = projected_hessian(s, f, &d.params).unwrap();
        es.push(format!("{:.3e}", sorted_eigen(&h).0[0]));
    }
    (rs, es)
}
