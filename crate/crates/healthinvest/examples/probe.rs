use healthinvest::boundary::solve_curve;
use healthinvest::params::ModelParams;

fn main() {
    let p = ModelParams::default();
    println!("reference-based: d1=sup|b(n/2)-b(2n)|, d2=sup|b(n)-b(2n)| at n/2 nodes, xi>=2:");
    for &h in &[2.0f64, 1000.0] {
        for n in [8usize, 12, 16, 24, 32, 48, 60] {
            let coarse = solve_curve(&p, h, n / 2).unwrap();
            let mid = solve_curve(&p, h, n).unwrap();
            let fine = solve_curve(&p, h, 2 * n).unwrap();
            let im = mid.interpolant();
            let if_ = fine.interpolant();
            let mut d1 = 0.0f64;
            let mut d2 = 0.0f64;
            for (&xi, &v) in coarse.xi_grid.iter().zip(&coarse.values) {
                if xi < 2.0 {
                    continue;
                }
                let r = if_.eval(xi);
                d1 = d1.max((v - r).abs());
                d2 = d2.max((im.eval(xi) - r).abs());
            }
            println!("h={h:6} n={n:3}: d1={d1:10.3e} d2={d2:10.3e} ratio={:6.3}", d2 / d1);
        }
    }
}
