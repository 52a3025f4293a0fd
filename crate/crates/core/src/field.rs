//! The conditioned radiance field.
//!
//! A shared trunk `g_nerf` turns the encoded sample position, the pooled
//! image feature and the per-sample voxel substitute into the
//! intermediate feature `V`. Small heads read `V`:
//!
//! * `g_sigma` (density, one layer with Softplus, then a fixed scale),
//! * `g_c` (colour, sees the encoded view direction),
//! * `g_h` (heatmaps, sees the pooled human feature),
//! * `g_co` (optional regressed coordinate).
//!
//! Only `g_c` receives the view direction, so density and heatmaps are
//! view independent by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Activation, Mlp, ParamStore, Real, Tape, Tensor, Var};
use crate::encoder::PooledFeature;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{Aabb, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub hidden: usize,
    /// Frequency bands for the sample position.
    pub pe_bands: usize,
    /// Frequency bands for the view direction.
    pub dir_bands: usize,
    /// Frequency bands for the normalised sample depth.
    pub depth_bands: usize,
    /// Feed the encoded position to the trunk.
    pub use_position: bool,
    /// Feed the encoded sample depth to the trunk.
    pub use_voxel: bool,
    /// Width of the pooled image feature; 0 disables image conditioning.
    pub img_channels: usize,
    /// Width of the pooled human feature given to `g_h`; 0 disables it.
    pub human_channels: usize,
    pub heat_channels: usize,
    /// Squash heatmap outputs through a sigmoid. Dense embedding targets
    /// switch this off.
    pub heat_sigmoid: bool,
    pub coord_head: bool,
    pub sigma_scale: f64,
    pub sigma_bias_init: f64,
    /// Box used to normalise sample positions to `[-1, 1]³`.
    pub bounds: Aabb,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            pe_bands: 4,
            dir_bands: 2,
            depth_bands: 2,
            use_position: true,
            use_voxel: true,
            img_channels: 134,
            human_channels: 134,
            heat_channels: 14,
            heat_sigmoid: true,
            coord_head: false,
            sigma_scale: 10.0,
            sigma_bias_init: -5.0,
            bounds: Aabb {
                min: Vec3::new(-1.0, -1.0, -1.0),
                max: Vec3::new(1.0, 1.0, 1.0),
            },
        }
    }
}

impl FieldConfig {
    pub fn position_width(&self) -> usize {
        if self.use_position {
            3 + 6 * self.pe_bands
        } else {
            0
        }
    }

    pub fn voxel_width(&self) -> usize {
        if self.use_voxel {
            1 + 2 * self.depth_bands
        } else {
            0
        }
    }

    pub fn dir_width(&self) -> usize {
        3 + 6 * self.dir_bands
    }

    pub fn trunk_width(&self) -> usize {
        self.position_width() + self.img_channels + self.voxel_width()
    }

    /// Map a world position into the normalised box frame.
    pub fn normalize(&self, x: Vec3) -> Vec3 {
        let c = self.bounds.center();
        let half = self.bounds.extent() * 0.5;
        Vec3::new((x[0] - c[0]) / half[0], (x[1] - c[1]) / half[1], (x[2] - c[2]) / half[2])
    }
}

/// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L-1}πx), cos(2^{L-1}πx)]`, each
/// block holding all three coordinates.
pub fn positional_encode(x: Vec3, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * bands);
    out.extend_from_slice(&x.0);
    encode_bands(&x.0, bands, &mut out);
    out
}

fn encode_bands(values: &[f64], bands: usize, out: &mut Vec<f64>) {
    let mut freq = std::f64::consts::PI;
    for _ in 0..bands {
        out.extend(values.iter().map(|v| (freq * v).sin()));
        out.extend(values.iter().map(|v| (freq * v).cos()));
        freq *= 2.0;
    }
}

/// Scalar analogue of [`positional_encode`] for the sample depth.
pub fn encode_scalar(x: f64, bands: usize) -> Vec<f64> {
    let mut out = vec![x];
    encode_bands(&[x], bands, &mut out);
    out
}

/// Per-sample inputs for a batch of field queries.
#[derive(Debug, Clone, Copy)]
pub struct FieldBatch<'a> {
    /// World positions.
    pub points: &'a [Vec3],
    /// Unit view directions.
    pub dirs: &'a [Vec3],
    /// Normalised sample depths, used by the voxel substitute.
    pub depths: &'a [f64],
    /// Pooled image features `[n, img_channels]` on the tape.
    pub img: Option<Var>,
    /// Pooled human features `[n, human_channels]` on the tape.
    pub human: Option<Var>,
}

/// Tape handles for a batch of field outputs.
#[derive(Debug, Clone, Copy)]
pub struct FieldVars {
    pub trunk: Var,
    pub sigma: Var,
    pub color: Var,
    pub heat: Option<Var>,
    pub coord: Option<Var>,
}

/// Plain-value output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput<T> {
    pub sigma: T,
    pub color: [T; 3],
    pub heatmap: Vec<T>,
    pub coord: Option<[T; 3]>,
}

#[derive(Debug, Clone)]
pub struct Field {
    config: FieldConfig,
    trunk: Mlp,
    sigma: Mlp,
    color: Mlp,
    heat: Mlp,
    coord: Option<Mlp>,
}

const TRUNK_ACTS: [Activation; 2] = [Activation::Relu, Activation::Relu];
const SIGMA_ACTS: [Activation; 1] = [Activation::Softplus];
const COLOR_ACTS: [Activation; 2] = [Activation::Relu, Activation::Sigmoid];
const COORD_ACTS: [Activation; 1] = [Activation::Relu];

fn heat_acts(cfg: &FieldConfig) -> [Activation; 2] {
    let last = if cfg.heat_sigmoid {
        Activation::Sigmoid
    } else {
        Activation::None
    };
    [Activation::Relu, last]
}

impl Field {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &FieldConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = config.hidden;
        if h == 0 || config.heat_channels == 0 || config.trunk_width() == 0 {
            return Err(Error::Argument("field widths must be positive".into()));
        }
        let trunk = Mlp::new(store, &format!("{prefix}.g_nerf"), &[config.trunk_width(), h, h], &TRUNK_ACTS, rng)?;
        let sigma = Mlp::new(store, &format!("{prefix}.g_sigma"), &[h, 1], &SIGMA_ACTS, rng)?;
        let bias = sigma.layers()[0].bias;
        store.set(bias, Tensor::filled(&[1], T::lit(config.sigma_bias_init)))?;
        let color = Mlp::new(store, &format!("{prefix}.g_c"), &[h + config.dir_width(), h, 3], &COLOR_ACTS, rng)?;
        let heat = Mlp::new(
            store,
            &format!("{prefix}.g_h"),
            &[h + config.human_channels, h, config.heat_channels],
            &heat_acts(config),
            rng,
        )?;
        let coord = if config.coord_head {
            Some(Mlp::new(store, &format!("{prefix}.g_co"), &[h, 3], &COORD_ACTS, rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            trunk,
            sigma,
            color,
            heat,
            coord,
        })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, config: &FieldConfig) -> Result<Self> {
        let bind = |name: &str, acts: &[Activation]| {
            Mlp::bind(store, &format!("{prefix}.{name}"), acts).map_err(|e| Error::Incompatible(e.to_string()))
        };
        let field = Self {
            config: config.clone(),
            trunk: bind("g_nerf", &TRUNK_ACTS)?,
            sigma: bind("g_sigma", &SIGMA_ACTS)?,
            color: bind("g_c", &COLOR_ACTS)?,
            heat: bind("g_h", &heat_acts(config))?,
            coord: if config.coord_head {
                Some(bind("g_co", &COORD_ACTS)?)
            } else {
                None
            },
        };
        if field.trunk.in_dim() != config.trunk_width()
            || field.heat.in_dim() != config.hidden + config.human_channels
            || field.heat.out_dim() != config.heat_channels
        {
            return Err(Error::Incompatible("field parameter shapes disagree with the config".into()));
        }
        Ok(field)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn num_scalars(&self) -> usize {
        self.trunk.num_scalars()
            + self.sigma.num_scalars()
            + self.color.num_scalars()
            + self.heat.num_scalars()
            + self.coord.as_ref().map_or(0, Mlp::num_scalars)
    }

    /// Evaluate a batch. Heatmaps are computed only when `want_heat`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        batch: &FieldBatch<'_>,
        want_heat: bool,
    ) -> Result<FieldVars> {
        let cfg = &self.config;
        let n = batch.points.len();
        if n == 0 {
            return Err(Error::Argument("empty field batch".into()));
        }
        if batch.dirs.len() != n || batch.depths.len() != n {
            return Err(shape_err!(
                "{n} points with {} directions and {} depths",
                batch.dirs.len(),
                batch.depths.len()
            ));
        }
        let mut trunk_in = Vec::with_capacity(3);
        if cfg.use_position {
            let mut data = Vec::with_capacity(n * cfg.position_width());
            for &p in batch.points {
                data.extend(positional_encode(cfg.normalize(p), cfg.pe_bands).into_iter().map(T::lit));
            }
            trunk_in.push(tape.leaf(Tensor::new(vec![n, cfg.position_width()], data)?));
        }
        match (cfg.img_channels, batch.img) {
            (0, None) => {}
            (c, Some(img)) => {
                let shape = tape.value(img).shape();
                if shape != [n, c] {
                    return Err(shape_err!("image feature {shape:?}, expected [{n}, {c}]"));
                }
                trunk_in.push(img);
            }
            (c, None) => return Err(shape_err!("field expects {c} image feature channels, none given")),
        }
        if cfg.use_voxel {
            let mut data = Vec::with_capacity(n * cfg.voxel_width());
            for &d in batch.depths {
                data.extend(encode_scalar(d, cfg.depth_bands).into_iter().map(T::lit));
            }
            trunk_in.push(tape.leaf(Tensor::new(vec![n, cfg.voxel_width()], data)?));
        }
        let x = if trunk_in.len() == 1 {
            trunk_in[0]
        } else {
            tape.concat_cols(&trunk_in)?
        };
        let trunk = self.trunk.forward(store, tape, x)?;

        let sigma = self.sigma.forward(store, tape, trunk)?;
        let sigma = tape.scale(sigma, T::lit(cfg.sigma_scale))?;

        let mut dir_data = Vec::with_capacity(n * cfg.dir_width());
        for &d in batch.dirs {
            dir_data.extend(positional_encode(d, cfg.dir_bands).into_iter().map(T::lit));
        }
        let dirs = tape.leaf(Tensor::new(vec![n, cfg.dir_width()], dir_data)?);
        let color_in = tape.concat_cols(&[trunk, dirs])?;
        let color = self.color.forward(store, tape, color_in)?;

        let heat = if want_heat {
            let heat_in = match (cfg.human_channels, batch.human) {
                (0, None) => trunk,
                (c, Some(h)) => {
                    let shape = tape.value(h).shape();
                    if shape != [n, c] {
                        return Err(shape_err!("human feature {shape:?}, expected [{n}, {c}]"));
                    }
                    tape.concat_cols(&[trunk, h])?
                }
                (c, None) => return Err(shape_err!("field expects {c} human feature channels, none given")),
            };
            Some(self.heat.forward(store, tape, heat_in)?)
        } else {
            None
        };
        let coord = match &self.coord {
            Some(m) => Some(m.forward(store, tape, trunk)?),
            None => None,
        };
        Ok(FieldVars {
            trunk,
            sigma,
            color,
            heat,
            coord,
        })
    }

    /// Batched evaluation returning plain values.
    pub fn eval_batch<T: Real>(
        &self,
        store: &ParamStore<T>,
        points: &[Vec3],
        dirs: &[Vec3],
        depths: &[f64],
        img: Option<&Tensor<T>>,
        human: Option<&Tensor<T>>,
    ) -> Result<Vec<FieldOutput<T>>> {
        let mut tape = Tape::new();
        let img = img.map(|t| tape.leaf(t.clone()));
        let human = human.map(|t| tape.leaf(t.clone()));
        let vars = self.forward(
            store,
            &mut tape,
            &FieldBatch {
                points,
                dirs,
                depths,
                img,
                human,
            },
            true,
        )?;
        Ok(unpack(&tape, &vars, points.len()))
    }

    /// One query with pooled features, as used by direct volume probes.
    pub fn eval<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: Vec3,
        d: Vec3,
        depth: f64,
        img: Option<&PooledFeature<T>>,
        human: Option<&PooledFeature<T>>,
    ) -> Result<FieldOutput<T>> {
        let row = |p: &PooledFeature<T>| {
            let v = p.concatenated();
            Tensor::new(vec![1, v.len()], v)
        };
        let img = img.map(row).transpose()?;
        let human = human.map(row).transpose()?;
        let mut out = self.eval_batch(store, &[x], &[d], &[depth], img.as_ref(), human.as_ref())?;
        Ok(out.pop().expect("one output per query"))
    }
}

pub fn unpack<T: Real>(tape: &Tape<T>, vars: &FieldVars, n: usize) -> Vec<FieldOutput<T>> {
    let sigma = tape.value(vars.sigma).data();
    let color = tape.value(vars.color).data();
    let heat = vars.heat.map(|h| tape.value(h));
    let coord = vars.coord.map(|c| tape.value(c).data());
    (0..n)
        .map(|i| FieldOutput {
            sigma: sigma[i],
            color: [color[i * 3], color[i * 3 + 1], color[i * 3 + 2]],
            heatmap: heat.map_or_else(Vec::new, |h| h.row(i).to_vec()),
            coord: coord.map(|c| [c[i * 3], c[i * 3 + 1], c[i * 3 + 2]]),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffmath::{finite_diff_check, random_coords};

    fn small_config() -> FieldConfig {
        FieldConfig {
            hidden: 16,
            img_channels: 6,
            human_channels: 4,
            heat_channels: 5,
            coord_head: true,
            ..FieldConfig::default()
        }
    }

    fn random_dir(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            .normalized()
            .unwrap()
    }

    struct Inputs {
        points: Vec<Vec3>,
        dirs: Vec<Vec3>,
        depths: Vec<f64>,
        img: Tensor<f64>,
        human: Tensor<f64>,
    }

    fn inputs(rng: &mut impl Rng, n: usize, cfg: &FieldConfig) -> Inputs {
        let mut t = |c: usize| Tensor::new(vec![n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let img = t(cfg.img_channels);
        let human = t(cfg.human_channels);
        Inputs {
            points: (0..n)
                .map(|_| Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)))
                .collect(),
            dirs: (0..n).map(|_| random_dir(rng)).collect(),
            depths: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            img,
            human,
        }
    }

    #[test]
    fn encoding_examples() {
        let x = Vec3::new(0.3, -0.7, 1.1);
        assert_eq!(positional_encode(x, 0), vec![0.3, -0.7, 1.1]);
        let z = positional_encode(Vec3::ZERO, 5);
        for band in 0..5 {
            let base = 3 + band * 6;
            assert!(z[base..base + 3].iter().all(|&s| s == 0.0));
            assert!(z[base + 3..base + 6].iter().all(|&c| c == 1.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let l = rng.gen_range(1..=8);
            assert_eq!(positional_encode(x, l).len(), 3 + 6 * l);
        }
        let e = positional_encode(x, 2);
        assert!((e[3 + 6 + 1] - (2.0 * std::f64::consts::PI * -0.7).sin()).abs() < 1e-15);
        assert!((e[3 + 6 + 3 + 2] - (2.0 * std::f64::consts::PI * 1.1).cos()).abs() < 1e-15);
    }

    #[test]
    fn output_ranges_hold_on_many_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_config();
        let mut store = ParamStore::<f32>::new();
        let field = Field::new(&mut store, "f", &cfg, &mut rng).unwrap();
        let inp = inputs(&mut rng, 10_000, &cfg);
        let out = field
            .eval_batch(&store, &inp.points, &inp.dirs, &inp.depths, Some(&inp.img.cast()), Some(&inp.human.cast()))
            .unwrap();
        for o in &out {
            assert!(o.sigma >= 0.0);
            assert!(o.color.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(o.heatmap.iter().all(|h| (0.0..=1.0).contains(h)));
            assert!(o.coord.unwrap().iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn density_and_heat_ignore_view_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_config();
        let mut store = ParamStore::<f64>::new();
        let field = Field::new(&mut store, "f", &cfg, &mut rng).unwrap();
        let inp = inputs(&mut rng, 32, &cfg);
        let other: Vec<Vec3> = (0..32).map(|_| random_dir(&mut rng)).collect();
        let a = field.eval_batch(&store, &inp.points, &inp.dirs, &inp.depths, Some(&inp.img), Some(&inp.human)).unwrap();
        let b = field.eval_batch(&store, &inp.points, &other, &inp.depths, Some(&inp.img), Some(&inp.human)).unwrap();
        let mut color_changed = false;
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sigma.to_bits(), y.sigma.to_bits());
            assert_eq!(x.heatmap, y.heatmap);
            assert_eq!(x.coord, y.coord);
            color_changed |= x.color != y.color;
        }
        assert!(color_changed);
    }

    #[test]
    fn batch_equals_loop_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_config();
        let mut store = ParamStore::<f32>::new();
        let field = Field::new(&mut store, "f", &cfg, &mut rng).unwrap();
        let inp = inputs(&mut rng, 64, &cfg);
        let (img, human) = (inp.img.cast::<f32>(), inp.human.cast::<f32>());
        let batch = field.eval_batch(&store, &inp.points, &inp.dirs, &inp.depths, Some(&img), Some(&human)).unwrap();
        for i in 0..64 {
            let row = |t: &Tensor<f32>| Tensor::new(vec![1, t.shape()[1]], t.row(i).to_vec()).unwrap();
            let single = field
                .eval_batch(&store, &inp.points[i..=i], &inp.dirs[i..=i], &inp.depths[i..=i], Some(&row(&img)), Some(&row(&human)))
                .unwrap();
            assert_eq!(single[0], batch[i], "row {i}");
        }
        // permuting the batch permutes the outputs
        let perm: Vec<usize> = (0..64).rev().collect();
        let pick = |t: &Tensor<f32>| {
            let c = t.shape()[1];
            Tensor::new(vec![64, c], perm.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap()
        };
        let points: Vec<Vec3> = perm.iter().map(|&i| inp.points[i]).collect();
        let dirs: Vec<Vec3> = perm.iter().map(|&i| inp.dirs[i]).collect();
        let depths: Vec<f64> = perm.iter().map(|&i| inp.depths[i]).collect();
        let permuted = field.eval_batch(&store, &points, &dirs, &depths, Some(&pick(&img)), Some(&pick(&human))).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(permuted[k], batch[i]);
        }
    }

    #[test]
    fn scalar_query_matches_batch_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small_config();
        let mut store = ParamStore::<f64>::new();
        let field = Field::new(&mut store, "f", &cfg, &mut rng).unwrap();
        let inp = inputs(&mut rng, 1, &cfg);
        let img = PooledFeature {
            mean: inp.img.data()[..3].to_vec(),
            variance: inp.img.data()[3..].to_vec(),
        };
        let human = PooledFeature {
            mean: inp.human.data()[..2].to_vec(),
            variance: inp.human.data()[2..].to_vec(),
        };
        let one = field.eval(&store, inp.points[0], inp.dirs[0], inp.depths[0], Some(&img), Some(&human)).unwrap();
        let batch = field.eval_batch(&store, &inp.points, &inp.dirs, &inp.depths, Some(&inp.img), Some(&inp.human)).unwrap();
        assert_eq!(one, batch[0]);
    }

    #[test]
    fn field_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_config();
        let mut store = ParamStore::<f64>::new();
        let field = Field::new(&mut store, "f", &cfg, &mut rng).unwrap();
        store.set(field.sigma.layers()[0].bias, Tensor::filled(&[1], 0.3)).unwrap();
        let inp = inputs(&mut rng, 6, &cfg);
        let probe: Vec<f64> = (0..6 * (1 + 3 + 5 + 3)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |s: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let img = tape.leaf(inp.img.clone());
            let human = tape.leaf(inp.human.clone());
            let vars = field.forward(
                s,
                &mut tape,
                &FieldBatch {
                    points: &inp.points,
                    dirs: &inp.dirs,
                    depths: &inp.depths,
                    img: Some(img),
                    human: Some(human),
                },
                true,
            )?;
            let all = tape.concat_cols(&[vars.sigma, vars.color, vars.heat.unwrap(), vars.coord.unwrap()])?;
            let w = tape.leaf(Tensor::new(vec![6, 12], probe.clone())?);
            let prod = tape.mul(all, w)?;
            let out = tape.sum(prod)?;
            let v = tape.value(out).data()[0];
            Ok::<_, Error>((v, tape.backward(out, None)?))
        };
        let coords = random_coords(&store, 30, &[], &mut rng);
        let err = finite_diff_check(f, &mut store, Some(&coords), 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn trunk_responds_to_image_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = small_config();
        let mut store = ParamStore::<f64>::new();
        let field = Field::new(&mut store, "f", &cfg, &mut rng).unwrap();
        let mut changed = 0;
        for _ in 0..20 {
            let inp = inputs(&mut rng, 8, &cfg);
            let bumped = inp.img.map(|x| x + 0.5);
            let run = |img: &Tensor<f64>| {
                let mut tape = Tape::new();
                let img = tape.leaf(img.clone());
                let human = tape.leaf(inp.human.clone());
                let vars = field
                    .forward(
                        &store,
                        &mut tape,
                        &FieldBatch {
                            points: &inp.points,
                            dirs: &inp.dirs,
                            depths: &inp.depths,
                            img: Some(img),
                            human: Some(human),
                        },
                        false,
                    )
                    .unwrap();
                tape.value(vars.trunk).clone()
            };
            if run(&inp.img).max_abs_diff(&run(&bumped)) > 1e-9 {
                changed += 1;
            }
        }
        assert!(changed >= 19, "trunk changed in only {changed} of 20 trials");
    }

    #[test]
    fn missing_features_are_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = small_config();
        let mut store = ParamStore::<f64>::new();
        let field = Field::new(&mut store, "f", &cfg, &mut rng).unwrap();
        let inp = inputs(&mut rng, 3, &cfg);
        let err = field.eval_batch(&store, &inp.points, &inp.dirs, &inp.depths, None, Some(&inp.human));
        assert!(matches!(err, Err(Error::Shape(_))));
        let wrong = Tensor::zeros(&[3, 2]);
        let err = field.eval_batch(&store, &inp.points, &inp.dirs, &inp.depths, Some(&wrong), Some(&inp.human));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn bind_round_trips_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = small_config();
        let mut store = ParamStore::<f64>::new();
        let field = Field::new(&mut store, "f", &cfg, &mut rng).unwrap();
        let again = Field::bind(&store, "f", &cfg).unwrap();
        assert_eq!(again.num_scalars(), field.num_scalars());
        let other = FieldConfig {
            heat_channels: 7,
            ..cfg
        };
        assert!(matches!(Field::bind(&store, "f", &other), Err(Error::Incompatible(_))));
    }
}
