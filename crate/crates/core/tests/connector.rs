use remem::connector::{Connector, ConnectorConfig};
use remem::memory::QueryKind;
use remem::numerics::graph::Graph;
use remem::numerics::{Matrix, ParamStore, Var};

const D: usize = 16;

fn connector(layers: usize) -> (ParamStore, Connector) {
    let mut store = ParamStore::new(21);
    let c = Connector::new(&mut store, &ConnectorConfig { layers, heads: 2, mlp_ratio: 4 }, D).unwrap();
    (store, c)
}

fn rows(n: usize, salt: usize) -> Matrix {
    Matrix::from_vec(n, D, (0..n * D).map(|i| (((i * 7 + salt * 11) % 17) as f32 / 17.0 - 0.5) * 2.0).collect())
}

fn permute(m: &Matrix, order: &[usize]) -> Matrix {
    let parts: Vec<Matrix> = order.iter().map(|&i| m.slice_rows(i, i + 1)).collect();
    Matrix::concat_rows(&parts.iter().collect::<Vec<_>>())
}

struct Inputs {
    action: Matrix,
    hindsight: Matrix,
    frame: Matrix,
    chunk: Matrix,
}

impl Inputs {
    fn new() -> Self {
        Self { action: rows(3, 0), hindsight: rows(2, 1), frame: rows(4, 2), chunk: rows(3, 3) }
    }

    fn fuse(&self, store: &ParamStore, c: &Connector, memory: bool) -> (Matrix, Vec<QueryKind>) {
        let mut g = Graph::new(store);
        let mut node = |m: &Matrix| -> Var { g.constant(m.clone()) };
        let (a, h) = (node(&self.action), node(&self.hindsight));
        let (f, k) = if memory { (Some(node(&self.frame)), Some(node(&self.chunk))) } else { (None, None) };
        let out = c.fuse(&mut g, a, Some(h), f, k).unwrap();
        (g.value(out.action_out).clone(), out.composition)
    }
}

#[test]
fn no_query_configuration_fuses_action_and_hindsight_only() {
    let (store, c) = connector(2);
    let (_, comp) = Inputs::new().fuse(&store, &c, false);
    assert_eq!(comp, vec![QueryKind::Action, QueryKind::Hindsight]);
    let (_, comp) = Inputs::new().fuse(&store, &c, true);
    assert_eq!(comp, QueryKind::ALL.to_vec());
}

#[test]
fn zero_depth_is_identity_on_action_and_hindsight() {
    let (store, c) = connector(0);
    let inp = Inputs::new();
    let mut g = Graph::new(&store);
    let a = g.constant(inp.action.clone());
    let h = g.constant(inp.hindsight.clone());
    let f = g.constant(inp.frame.clone());
    let out = c.fuse(&mut g, a, Some(h), Some(f), None).unwrap();
    assert_eq!(out.depth, 0);
    assert_eq!(g.value(out.action_out), &inp.action);
    assert_eq!(g.value(out.hindsight_out.unwrap()), &inp.hindsight);
}

#[test]
fn frame_row_permutation_round_trips() {
    let (store, c) = connector(2);
    let inp = Inputs::new();
    let (base, _) = inp.fuse(&store, &c, true);
    let perm = [2usize, 0, 3, 1];
    let permuted = Inputs { frame: permute(&inp.frame, &perm), ..Inputs::new() };
    let (moved, _) = permuted.fuse(&store, &c, true);
    // Sets, not sequences: only summation order can differ.
    assert!(base.max_abs_diff(&moved) < 1e-5);
    let mut inverse = [0usize; 4];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let back = Inputs { frame: permute(&permuted.frame, &inverse), ..Inputs::new() };
    assert_eq!(back.frame, inp.frame);
    assert_eq!(back.fuse(&store, &c, true).0, base);
}

#[test]
fn chunk_state_reaches_action_output() {
    let (store, c) = connector(1);
    let inp = Inputs::new();
    let (base, _) = inp.fuse(&store, &c, true);
    let changed = Inputs { chunk: rows(3, 8), ..Inputs::new() };
    assert!(changed.fuse(&store, &c, true).0.max_abs_diff(&base) > 0.0);
}

#[test]
fn fuse_is_deterministic_and_checks_inputs() {
    let (store, c) = connector(2);
    let inp = Inputs::new();
    assert_eq!(inp.fuse(&store, &c, true), inp.fuse(&store, &c, true));
    let mut g = Graph::new(&store);
    let wide = g.constant(Matrix::zeros(2, D + 1));
    assert!(c.fuse(&mut g, wide, None, None, None).is_err());
    let empty = g.constant(Matrix::zeros(0, D));
    assert!(c.fuse(&mut g, empty, None, None, None).is_err());
}
