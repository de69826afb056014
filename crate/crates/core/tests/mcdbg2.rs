use std::collections::HashMap;
use graspfield::math::vec3;
use graspfield::reconstruction::{marching_cubes, DensityGrid, DEFAULT_ISO};
use graspfield::rng::{stream, StreamTag};
use rand::Rng;

#[test]
fn dump() {
    let dims = [10usize, 10, 10];
    let mut rng = stream(44, StreamTag::Generic, 2);
    let interior = |i: usize, d: usize| i >= 1 && i + 1 < d;
    let mut sigma = Vec::new();
    for iz in 0..dims[2] { for iy in 0..dims[1] { for ix in 0..dims[0] {
        let inside = interior(ix, dims[0]) && interior(iy, dims[1]) && interior(iz, dims[2]);
        sigma.push(if inside { rng.gen_range(0.0..140.0) } else { 0.0 });
    }}}
    let sig = sigma.clone();
    let mut it = sigma.into_iter();
    let grid = DensityGrid::from_fn(vec3(0.0, 0.0, 0.0), 0.01, dims, |_| (it.next().unwrap(), 0));
    let out = marching_cubes(&grid, DEFAULT_ISO).unwrap();
    let mesh = &out.mesh;
    let mut count: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        for k in 0..3 { count.entry((f[k], f[(k + 1) % 3])).or_default().push(fi); }
    }
    let mut shown = 0;
    for (&(a, b), owners) in &count {
        if owners.len() > 1 && shown < 2 {
            shown += 1;
            println!("directed edge ({a},{b}) in faces {owners:?}");
            for &fi in owners {
                let f = mesh.faces[fi];
                println!("  face {fi}: {f:?}");
                for vi in f {
                    let v = mesh.vertices[vi as usize];
                    println!("    v{vi} = ({:.4}, {:.4}, {:.4})", v.x, v.y, v.z);
                }
            }
            let v = mesh.vertices[a as usize];
            let w = mesh.vertices[b as usize];
            let lo = |c: f64| (((c / 0.01) - 0.5).floor() as i64).max(0);
            println!("  occ block around chord:");
            for z in lo(v.z.min(w.z)) - 1..=lo(v.z.max(w.z)) + 2 {
                for y in lo(v.y.min(w.y)) - 1..=lo(v.y.max(w.y)) + 2 {
                    for x in lo(v.x.min(w.x)) - 1..=lo(v.x.max(w.x)) + 2 {
                        if (0..10).contains(&x) && (0..10).contains(&y) && (0..10).contains(&z) {
                            let fl = (x + 10 * (y + 10 * z)) as usize;
                            let occ = 1.0 - (-sig[fl] * 0.01f64).exp();
                            if occ > 0.5 { println!("    IN  [{x},{y},{z}] occ={occ:.3}"); }
                            else if occ > 0.0 { println!("    out [{x},{y},{z}] occ={occ:.3}"); }
                        }
                    }
                }
            }
        }
    }
}
