use crate::error::Result;
use crate::gradcore::array::Array;
use crate::gradcore::graph::{Graph, NodeId};
use crate::gradcore::params::{Binder, ParameterStore};
use crate::gradcore::rng::RngStream;

/// Multi-layer perceptron with SiLU between layers. `hidden_layers = 0`
/// degenerates to a single affine map. The final layer always initializes to
/// zero, so a fresh network outputs exactly zero everywhere; several
/// components rely on that (uniform beliefs at init, inactive residual).
#[derive(Clone, Debug)]
pub struct Mlp {
    group: String,
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(group: &str, prefix: &str, in_dim: usize, hidden: usize, hidden_layers: usize, out_dim: usize) -> Self {
        let mut sizes = vec![in_dim];
        for _ in 0..hidden_layers {
            sizes.push(hidden);
        }
        sizes.push(out_dim);
        Self { group: group.to_string(), prefix: prefix.to_string(), sizes }
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    fn layer_names(&self, layer: usize) -> (String, String) {
        (
            format!("{}/w{layer}", self.prefix),
            format!("{}/b{layer}", self.prefix),
        )
    }

    /// Registers parameters: He-normal hidden weights, zero biases, zero
    /// final layer.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        self.init_with_final_std(store, rng, 0.0)
    }

    /// Like [`Mlp::init`] but draws the final weights from N(0, std^2).
    /// Ensemble heads use this: they need to disagree from the start.
    pub fn init_with_final_std(
        &self,
        store: &mut ParameterStore,
        rng: &mut RngStream,
        final_std: f64,
    ) -> Result<()> {
        let layers = self.sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wname, bname) = self.layer_names(l);
            let std = if l + 1 == layers {
                final_std
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let w = if std == 0.0 {
                Array::zeros(vec![fan_in, fan_out])
            } else {
                let data: Vec<f64> = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
                Array::new(vec![fan_in, fan_out], data)?
            };
            store.insert(&wname, &self.group, w)?;
            store.insert(&bname, &self.group, Array::zeros(vec![fan_out]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, x: NodeId) -> Result<NodeId> {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let (wname, bname) = self.layer_names(l);
            let w = binder.node(g, &wname)?;
            let b = binder.node(g, &bname)?;
            h = g.affine(h, w, b)?;
            if l + 1 < layers {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::rng::StreamId;

    #[test]
    fn fresh_mlp_outputs_zero() {
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(7, StreamId::Init);
        let mlp = Mlp::new("test", "test/net", 3, 8, 2, 4);
        mlp.init(&mut store, &mut rng).unwrap();

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let x = g
            .constant(Array::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.2]).unwrap())
            .unwrap();
        let y = mlp.forward(&mut g, &mut binder, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_hidden_layers_is_affine() {
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(7, StreamId::Init);
        let mlp = Mlp::new("test", "test/lin", 3, 8, 0, 2);
        mlp.init(&mut store, &mut rng).unwrap();
        assert_eq!(store.names().count(), 2);
    }
}
