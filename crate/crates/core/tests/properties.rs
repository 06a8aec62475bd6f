use gliomesh::domain::{blend_lame, cell_geometry, lame_parameters, make_uniform_mesh, Lame};
use gliomesh::evaluate::{equal_volume_plan, recurrence_coverage, standard_plan};
use gliomesh::forward::{logistic_step, simulate, SimOptions};
use gliomesh::imaging::pet_loss;
use gliomesh::optimize::{prolong_cells, prolong_nodes, Adam};
use gliomesh::physics::{PhysicsSetup, REFERENCE_MODULUS};
use gliomesh::priors::symmetry_scales;
use gliomesh::transfer::{grid_to_particles, particles_to_grid, stencil};
use gliomesh::{DynamicsParams, GridSpec, MaterialTable, ParticleMesh, TissueField, Topology};
use proptest::prelude::*;

fn jittered_mesh(spec: &GridSpec, jitter: &[f64]) -> ParticleMesh {
    let topo = Topology::new(spec);
    let h = spec.spacings().into_iter().fold(f64::INFINITY, f64::min);
    let mut pos = spec.node_lattice().points();
    let ndim = spec.ndim();
    for (k, &n) in topo.interior_nodes.iter().enumerate() {
        for a in 0..ndim {
            pos[n * ndim + a] += 0.3 * h * jitter[(k * ndim + a) % jitter.len()];
        }
    }
    let mut all = Vec::new();
    for _ in 0..=spec.nt() {
        all.extend_from_slice(&pos);
    }
    ParticleMesh::new(spec, all).unwrap()
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop_oneof![
        (4usize..9, 4usize..9).prop_map(|(a, b)| vec![a, b]),
        (4usize..6, 4usize..6, 4usize..6).prop_map(|(a, b, c)| vec![a, b, c]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pinned_boundary_volumes_telescope_to_one(
        shape in shape_strategy(),
        jitter in prop::collection::vec(-1.0f64..1.0, 1..64),
    ) {
        let spec = GridSpec::new(&shape, 1).unwrap();
        let mesh = jittered_mesh(&spec, &jitter);
        let g = cell_geometry(&Topology::new(&spec), &mesh, 0).unwrap();
        let total: f64 = g.volumes.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10, "total volume {total}");
    }

    #[test]
    fn uniform_mesh_volumes_are_exact(shape in shape_strategy()) {
        let spec = GridSpec::new(&shape, 1).unwrap();
        let g = cell_geometry(&Topology::new(&spec), &make_uniform_mesh(&spec), 0).unwrap();
        for v in g.volumes {
            prop_assert!((v / spec.cell_volume() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stencil_is_a_partition_of_unity(x in prop::collection::vec(-0.3f64..1.3, 3), n in 4usize..10) {
        let spec = GridSpec::new(&[n, n, n], 1).unwrap();
        let st = stencil(&spec.node_lattice(), &x);
        let sum: f64 = st.weights[..st.corners].iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(st.weights[..st.corners].iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn grid_to_particles_reproduces_affine_fields(
        pts in prop::collection::vec(0.0f64..1.0, 2..40),
        coef in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let spec = GridSpec::new(&[6, 7], 1).unwrap();
        let lat = spec.node_lattice();
        let f = |p: &[f64]| coef[0] + coef[1] * p[0] + coef[2] * p[1];
        let grid: Vec<f64> = (0..lat.len()).map(|k| f(&lat.point(k))).collect();
        let n = pts.len() / 2 * 2;
        let s = grid_to_particles(&lat, &grid, &pts[..n]).unwrap();
        for (v, p) in s.values.iter().zip(pts[..n].chunks(2)) {
            prop_assert!((v - f(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn transfers_are_linear(
        pts in prop::collection::vec(0.0f64..1.0, 40),
        a in prop::collection::vec(-1.0f64..1.0, 20),
        b in prop::collection::vec(-1.0f64..1.0, 20),
        s in -3.0f64..3.0,
    ) {
        let spec = GridSpec::new(&[4, 4], 1).unwrap();
        let lat = spec.node_lattice();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let pa = particles_to_grid(&lat, &a, &pts).unwrap().values;
        let pb = particles_to_grid(&lat, &b, &pts).unwrap().values;
        let pm = particles_to_grid(&lat, &mix, &pts).unwrap().values;
        for i in 0..pm.len() {
            prop_assert!((pm[i] - (pa[i] + s * pb[i])).abs() < 1e-12);
        }
        let ga: Vec<f64> = (0..lat.len()).map(|k| a[k % a.len()]).collect();
        let gb: Vec<f64> = (0..lat.len()).map(|k| b[k % b.len()]).collect();
        let gm: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x + s * y).collect();
        let sa = grid_to_particles(&lat, &ga, &pts).unwrap().values;
        let sb = grid_to_particles(&lat, &gb, &pts).unwrap().values;
        let sm = grid_to_particles(&lat, &gm, &pts).unwrap().values;
        for i in 0..sm.len() {
            prop_assert!((sm[i] - (sa[i] + s * sb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn blended_lame_stays_in_material_hull(
        m in prop::collection::vec(0.0f64..1.0, 3),
        c in 0.0f64..1.0,
    ) {
        let scale = m.iter().sum::<f64>().max(1.0);
        let m = [m[0] / scale, m[1] / scale, m[2] / scale];
        let table = lame_parameters(&MaterialTable::default()).unwrap();
        let all: Vec<Lame> = vec![table.wm, table.gm, table.csf, table.tumor];
        let lo_l = all.iter().map(|l| l.lambda).fold(f64::INFINITY, f64::min);
        let hi_l = all.iter().map(|l| l.lambda).fold(0.0, f64::max);
        let lo_u = all.iter().map(|l| l.mu).fold(f64::INFINITY, f64::min);
        let hi_u = all.iter().map(|l| l.mu).fold(0.0, f64::max);
        let b = blend_lame(&table, m, c);
        prop_assert!(b.lambda >= lo_l * (1.0 - 1e-12) && b.lambda <= hi_l * (1.0 + 1e-12));
        prop_assert!(b.mu >= lo_u * (1.0 - 1e-12) && b.mu <= hi_u * (1.0 + 1e-12));
    }

    #[test]
    fn logistic_step_stays_in_unit_interval(c in 0.0f64..=1.0, rho in 0.0f64..50.0, dt in 0.0f64..1.0) {
        let v = logistic_step(c, rho, dt);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn pet_loss_is_bounded_and_affine_invariant(
        c in prop::collection::vec(0.0f64..1.0, 16),
        pet in prop::collection::vec(0.0f64..5.0, 16),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let region = vec![true; 16];
        let l = pet_loss(&c, &pet, &region);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        let spread = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread(&c) > 1e-3 && spread(&pet) > 1e-3);
        let scaled: Vec<f64> = pet.iter().map(|p| a * p + b).collect();
        prop_assert!((pet_loss(&c, &scaled, &region) - l).abs() < 1e-9);
        let c2: Vec<f64> = c.iter().map(|v| a * v + b).collect();
        prop_assert!((pet_loss(&c2, &pet, &region) - l).abs() < 1e-9);
    }

    #[test]
    fn symmetry_terms_are_mirror_invariant(field in prop::collection::vec(0.0f64..1.0, 64)) {
        let shape = [8, 8];
        let mirrored: Vec<f64> = (0..64).map(|k| field[(7 - k / 8) * 8 + k % 8]).collect();
        let a = symmetry_scales(&field, &shape, 0).unwrap();
        let b = symmetry_scales(&mirrored, &shape, 0).unwrap();
        for s in 0..3 {
            prop_assert!(a[s] >= 0.0);
            prop_assert!((a[s] - b[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn plans_grow_with_margin_and_coverage_is_a_fraction(
        core_at in 0usize..256,
        rec in prop::collection::vec(any::<bool>(), 256),
        m1 in 0.0f64..0.3,
        dm in 0.0f64..0.3,
    ) {
        let spec = GridSpec::new(&[16, 16], 1).unwrap();
        let mut core = vec![false; 256];
        core[core_at] = true;
        let diffusive = vec![true; 256];
        let small = standard_plan(&core, &diffusive, &spec, m1).unwrap();
        let large = standard_plan(&core, &diffusive, &spec, m1 + dm).unwrap();
        prop_assert!(small.mask.iter().zip(&large.mask).all(|(a, b)| !a || *b));
        prop_assert!(small.mask[core_at]);
        prop_assume!(rec.iter().any(|&r| r));
        let cs = recurrence_coverage(&small.mask, &rec).unwrap();
        let cl = recurrence_coverage(&large.mask, &rec).unwrap();
        prop_assert!((0.0..=100.0).contains(&cs));
        prop_assert!(cl >= cs);
    }

    #[test]
    fn equal_volume_plan_has_target_volume_and_top_values(
        c in prop::collection::vec(0.0f64..1.0, 64),
        admissible in prop::collection::vec(any::<bool>(), 64),
        frac in 0.0f64..1.0,
    ) {
        let avail = admissible.iter().filter(|&&a| a).count();
        let target = (frac * avail as f64) as usize;
        let (plan, tau) = equal_volume_plan(&c, target, &admissible).unwrap();
        prop_assert_eq!(plan.mask.iter().filter(|&&m| m).count(), target);
        for k in 0..64 {
            prop_assert!(!plan.mask[k] || admissible[k]);
            if plan.mask[k] {
                prop_assert!(c[k] >= tau);
            } else if admissible[k] {
                prop_assert!(c[k] <= tau);
            }
        }
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op(x in prop::collection::vec(-5.0f64..5.0, 1..20), steps in 1u64..50) {
        let mut y = x.clone();
        let (mut m, mut v) = (vec![0.0; x.len()], vec![0.0; x.len()]);
        let mut step = 0;
        for _ in 0..steps {
            Adam::default().step(&mut y, &vec![0.0; x.len()], &mut m, &mut v, &mut step, |_| 0.1);
        }
        prop_assert_eq!(y, x);
    }

    #[test]
    fn prolongation_preserves_constants_and_affine_interiors(k in -2.0f64..2.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let coarse = GridSpec::new(&[8, 8], 2).unwrap();
        let fine = GridSpec::new(&[16, 16], 2).unwrap();
        let fc = prolong_cells(&coarse, &fine, &vec![k; 64]);
        prop_assert!(fc.iter().all(|v| (v - k).abs() < 1e-12));
        let f = |p: &[f64]| k + a * p[0] + b * p[1];
        let cc: Vec<f64> = (0..64).map(|i| f(&coarse.cell_lattice().point(i))).collect();
        let fine_cells = fine.cell_lattice();
        let h = coarse.spacing(0) / 2.0;
        for (i, v) in prolong_cells(&coarse, &fine, &cc).iter().enumerate() {
            let p = fine_cells.point(i);
            if p.iter().all(|&x| x > h && x < 1.0 - h) {
                prop_assert!((v - f(&p)).abs() < 1e-12);
            }
        }
        let nodes = coarse.node_lattice();
        let disp: Vec<f64> = (0..nodes.len()).flat_map(|i| { let p = nodes.point(i); [f(&p), -f(&p)] }).collect();
        let fd = prolong_nodes(&coarse, &fine, &disp);
        let fine_nodes = fine.node_lattice();
        for i in 0..fine_nodes.len() {
            let p = fine_nodes.point(i);
            prop_assert!((fd[2 * i] - f(&p)).abs() < 1e-12);
            prop_assert!((fd[2 * i + 1] + f(&p)).abs() < 1e-12);
        }
    }
}

#[test]
fn pure_diffusion_conserves_mass() {
    let spec = GridSpec::new(&[12, 12], 4).unwrap();
    let tissue = TissueField::new(vec![[0.6, 0.4, 0.0]; spec.num_nodes()]).unwrap();
    let setup = PhysicsSetup::new(&spec, &tissue, &MaterialTable::default(), REFERENCE_MODULUS, 0.1).unwrap();
    let c0: Vec<f64> = (0..spec.num_cells()).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
    let params = DynamicsParams {
        d_gm: 0.002,
        r: 3.0,
        rho: 0.0,
        gamma: 0.0,
    };
    let opts = SimOptions {
        steps: 40,
        ..SimOptions::default()
    };
    let traj = simulate(&setup, &params, &c0, &opts).unwrap();
    let m0: f64 = c0.iter().sum();
    for n in 0..=spec.nt() {
        let m: f64 = traj.tumor.slice(n).iter().sum();
        assert!((m - m0).abs() < 1e-8 * m0, "slice {n}: {m} vs {m0}");
    }
    let again = simulate(&setup, &params, &c0, &opts).unwrap();
    assert_eq!(again.final_c, traj.final_c);
}
