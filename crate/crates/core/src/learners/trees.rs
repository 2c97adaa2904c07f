//! Gradient boosting of depth-limited regression trees under squared loss.

use nalgebra::DMatrix;

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if x[(row, *feature)] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Ensemble {
    base: f64,
    learning_rate: f64,
    trees: Vec<Tree>,
}

struct Builder<'a> {
    x: &'a DMatrix<f64>,
    resid: &'a [f64],
    /// Row indices sorted by each feature, computed once.
    order: &'a [Vec<usize>],
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn build(&mut self, rows: &[usize], member: &mut [bool], depth: usize) -> usize {
        let sum: f64 = rows.iter().map(|&i| self.resid[i]).sum();
        let n = rows.len() as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(sum / n));
        if depth == 0 || rows.len() < 2 * self.min_leaf {
            return id;
        }
        let base = sum * sum / n;
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, ord) in self.order.iter().enumerate() {
            let mut left_sum = 0.0;
            let mut left_n = 0usize;
            let mut prev: Option<usize> = None;
            for &i in ord.iter().filter(|&&i| member[i]) {
                if let Some(p) = prev {
                    let (a, b) = (self.x[(p, f)], self.x[(i, f)]);
                    if a < b && left_n >= self.min_leaf && rows.len() - left_n >= self.min_leaf {
                        let rn = n - left_n as f64;
                        let rs = sum - left_sum;
                        let gain = left_sum * left_sum / left_n as f64 + rs * rs / rn - base;
                        if gain > 1e-12 * base.abs().max(1e-300) && best.is_none_or(|(g, _, _)| gain > g) {
                            best = Some((gain, f, 0.5 * (a + b)));
                        }
                    }
                }
                left_sum += self.resid[i];
                left_n += 1;
                prev = Some(i);
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.x[(i, feature)] <= threshold);
        for &i in &r {
            member[i] = false;
        }
        let left = self.build(&l, member, depth - 1);
        for &i in &r {
            member[i] = true;
        }
        for &i in &l {
            member[i] = false;
        }
        let right = self.build(&r, member, depth - 1);
        for &i in &l {
            member[i] = true;
        }
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl Ensemble {
    pub(crate) fn fit(
        x: &DMatrix<f64>,
        y: &[f64],
        rounds: usize,
        depth: usize,
        learning_rate: f64,
        min_leaf: usize,
    ) -> Self {
        let (n, d) = x.shape();
        let base = crate::linalg::mean(y);
        let mut pred = vec![base; n];
        let order: Vec<Vec<usize>> = (0..d)
            .map(|f| {
                let mut o: Vec<usize> = (0..n).collect();
                o.sort_by(|&a, &b| x[(a, f)].total_cmp(&x[(b, f)]).then(a.cmp(&b)));
                o
            })
            .collect();
        let rows: Vec<usize> = (0..n).collect();
        let mut trees = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let resid: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
            let mut member = vec![true; n];
            let mut b = Builder {
                x,
                resid: &resid,
                order: &order,
                min_leaf: min_leaf.max(1),
                nodes: Vec::new(),
            };
            b.build(&rows, &mut member, depth);
            let tree = Tree { nodes: b.nodes };
            if matches!(tree.nodes.as_slice(), [Node::Leaf(_)]) {
                // no admissible split: residual mean is zero after the first
                // round, so further rounds cannot change anything
                break;
            }
            for (i, p) in pred.iter_mut().enumerate() {
                *p += learning_rate * tree.predict_row(x, i);
            }
            trees.push(tree);
        }
        Ensemble {
            base,
            learning_rate,
            trees,
        }
    }

    pub(crate) fn predict_row(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        self.base
            + self.learning_rate
                * self
                    .trees
                    .iter()
                    .map(|t| t.predict_row(x, row))
                    .sum::<f64>()
    }
}
