//! Non-dominated subsets under maximisation of (purity, yield).

use std::io::{self, Write};

/// `a` dominates `b` when it is no worse in both objectives and better in one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Indices of the non-dominated points, by increasing purity. Of several
/// identical points only the first is kept. Points with a non-finite
/// objective are ignored.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| points[i].0.is_finite() && points[i].1.is_finite()).collect();
    // Highest purity first, then highest yield, then input order.
    order.sort_by(|&i, &j| {
        points[j].0.total_cmp(&points[i].0).then(points[j].1.total_cmp(&points[i].1)).then(i.cmp(&j))
    });
    let mut front = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for i in order {
        if points[i].1 > best {
            best = points[i].1;
            front.push(i);
        }
    }
    front.reverse();
    front
}

/// `purity,yield,theta_0..theta_d` for the given front members.
pub fn write_pareto_csv<W: Write>(
    front: &[usize],
    points: &[(f64, f64)],
    thetas: &[Vec<f64>],
    mut w: W,
) -> io::Result<()> {
    let d = thetas.first().map_or(0, Vec::len);
    let mut header = String::from("purity,yield");
    for k in 0..d {
        header.push_str(&format!(",theta_{k}"));
    }
    writeln!(w, "{header}")?;
    for &i in front {
        let mut line = format!("{:?},{:?}", points[i].0, points[i].1);
        for v in &thetas[i] {
            line.push_str(&format!(",{v:?}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_example() {
        let pts = [(0.9, 0.5), (0.8, 0.9), (0.7, 0.4)];
        assert_eq!(pareto_front(&pts), vec![1, 0]);
        assert_eq!(pareto_front(&[(0.5, 0.5)]), vec![0]);
        assert!(pareto_front(&[]).is_empty());
    }

    #[test]
    fn duplicates_keep_first() {
        let pts = [(0.7, 0.4), (0.9, 0.5), (0.9, 0.5), (0.9, 0.2), (0.6, 0.5)];
        assert_eq!(pareto_front(&pts), vec![1]);
        assert_eq!(pareto_front(&[(0.5, f64::NAN), (0.1, 0.1)]), vec![1]);
    }
}
