use metamorph::scene::Scene;
use metamorph::spring_energy::Spring;
use metamorph::spring_placement::*;
use metamorph::stability_opt::*;

fn main() {
    let scene = Scene::load(std::path::Path::new("/tmp/m6/scene.json")).unwrap();
    let mut structure = scene.structure.clone();
    let forms = &scene.forms;
    let opts = OptimizerOptions {
        k0: 50.0,
        ..OptimizerOptions::default()
    };
    let tols = resolve_tolerances(&structure, &opts);
    println!("tols: eig_margin {:.4e} residual_tol {:.4e}", tols.eig_margin, tols.residual_tol);
    let contexts: Vec<FormContext> = forms.iter().map(|f| form_context(&structure, f).unwrap()).collect();
    println!("null dims: {:?}", contexts.iter().map(|c| c.null.dim()).collect::<Vec<_>>());
    let mut design = DesignVector::from_springs(&structure.springs, opts.k0);
    for iter in 0..12 {
        let residuals: Vec<f64> = forms
            .iter()
            .zip(&contexts)
            .map(|(f, c)| residual_in_context(&structure, f, &design.params, c).unwrap().norm())
            .collect();
        let mode = most_unstable_mode(&structure, forms, &design.params, &contexts, tols.eig_margin).unwrap();
        println!(
            "iter {iter}: springs {} residuals {:?} mode {:?}",
            structure.springs.len(),
            residuals.iter().map(|r| format!("{r:.3e}")).collect::<Vec<_>>(),
            mode.as_ref().map(|m| (m.form_index, format!("{:.3e}", m.eigenvalue)))
        );
        if mode.is_none() && residuals.iter().all(|&r| r <= tols.residual_tol) {
            println!("CONVERGED");
            break;
        }
        let (eig, velocities, probe_form) = match &mode {
            Some(m) => (m.eigenvalue, m.velocities.clone(), m.form_index),
            None => {
                println!("  (residual fallback)");
                let (i, _, v) = forms
                    .iter()
                    .zip(&contexts)
                    .enumerate()
                    .map(|(i, (f, c))| {
                        let r = residual_in_context(&structure, f, &design.params, c).unwrap();
                        (i, r.norm(), c.null.lift(&r))
                    })
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                (0.0, v, i)
            }
        };
        let _ = eig;
        let n = velocities.norm();
        let disp = mode_deformation(&structure, &forms[probe_form], &(&velocities / n), 1e-3);
        let (bar_a, partners) = rank_candidate_bars(&disp, &structure).unwrap();
        println!("  bar_a {bar_a} partners {:?}", partners);
        let mut placed = None;
        for b in partners {
            match place_min_energy_spring(&structure, forms, bar_a, b) {
                Ok(p) => {
                    let dup = structure.springs.iter().any(|s| {
                        (s.body_1 == p.bar_a && s.body_2 == p.bar_b) || (s.body_1 == p.bar_b && s.body_2 == p.bar_a)
                    });
                    println!(
                        "    pair ({bar_a},{b}): s {:.3} t {:.3} rest {:.2} mismatch {:.3e} pair_used_before={dup}",
                        p.s, p.t, p.rest_length, p.length_mismatch
                    );
                    placed = Some(p);
                    break;
                }
                Err(e) => println!("    pair ({bar_a},{b}): rejected {e}"),
            }
        }
        let Some(p) = placed else { println!("  NO PLACEMENT"); break };
        structure.springs.push(Spring {
            id: structure.springs.len(),
            body_1: p.bar_a,
            body_2: p.bar_b,
            u1_local: structure.bars[p.bar_a].point_on_line(p.s),
            u2_local: structure.bars[p.bar_b].point_on_line(p.t),
            k: opts.k0,
            l: p.rest_length,
            l0: p.rest_length,
            z_layer: None,
        });
        design = DesignVector::from_springs(&structure.springs, opts.k0);
        let t0 = std::time::Instant::now();
        let out = optimize_design(&structure, forms, &design, &opts, None).unwrap();
        design = out.design;
        design.apply_to(&mut structure);
        println!(
            "  optimize: converged={} outer={} time={:.2}s residuals {:?} min_eigs {:?}",
            out.report.converged,
            out.report.iterations,
            t0.elapsed().as_secs_f64(),
            out.report.forms.iter().map(|f| format!("{:.3e}", f.residual_norm)).collect::<Vec<_>>(),
            out.report.forms.iter().map(|f| format!("{:.3e}", f.eigenvalues[0])).collect::<Vec<_>>()
        );
    }
}
