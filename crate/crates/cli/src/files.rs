use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use guidedpose::pose_geometry::{read_point_cloud, KeypointModel};
use guidedpose::semantic_norm::{temperature_softmax, SoftSegmentation};
use guidedpose::synthgen::PrimitiveShape;
use guidedpose::tensor_io::{read_scene, read_tensor, write_tensor, SceneDescription, Validation};
use guidedpose::FeatureMap;

use crate::{CliError, CliResult, InputArgs, Status};

pub const SCENE_FILE: &str = "scene.txt";
pub const SEG_FILE: &str = "seg.cpt";
pub const FIELD_FILE: &str = "field.cpt";
pub const CONF_FILE: &str = "conf.cpt";
pub const GT_FILE: &str = "gt_poses.txt";

pub fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(Status::Io, format!("{}: {e}", path.display()))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

pub fn write_map(path: &Path, map: &FeatureMap) -> CliResult {
    let mut buf = Vec::new();
    write_tensor(&map.to_tensor(), &mut buf)?;
    write_bytes(path, &buf)
}

pub fn read_map(path: &Path) -> CliResult<FeatureMap> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let t = read_tensor(std::io::BufReader::new(file), Validation::Finite)
        .map_err(|e| CliError::from(e).with_path(path))?;
    FeatureMap::from_tensor(&t).map_err(|e| CliError::from(e).with_path(path))
}

impl CliError {
    fn with_path(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

pub fn load_scene(path: &Path) -> CliResult<SceneDescription> {
    read_scene(&read_text(path)?).map_err(|e| CliError::from(e).with_path(path))
}

/// Resolves every scene object's model: primitives inline, point clouds
/// relative to the scene file.
pub fn load_models(scene: &SceneDescription, scene_path: &Path) -> CliResult<BTreeMap<u32, KeypointModel>> {
    let base = scene_path.parent().unwrap_or(Path::new("."));
    let mut out = BTreeMap::new();
    for obj in &scene.objects {
        let vertices = match PrimitiveShape::parse_ref(&obj.model_ref) {
            Some(shape) => shape?.vertices(),
            None => {
                let p = base.join(&obj.model_ref);
                read_point_cloud(&p).map_err(|e| CliError::from(e).with_path(&p))?
            }
        };
        out.insert(obj.class_id, KeypointModel::from_vertices(obj.class_id, vertices, obj.symmetric)?);
    }
    Ok(out)
}

/// Decoder outputs of one image, all paths checked before anything is read.
pub struct Inputs {
    pub scene: SceneDescription,
    pub models: BTreeMap<u32, KeypointModel>,
    pub seg: SoftSegmentation,
    pub field: FeatureMap,
    pub raw_conf: FeatureMap,
}

pub fn load_inputs(args: &InputArgs) -> CliResult<Inputs> {
    let pick = |explicit: &Option<PathBuf>, name: &str| -> CliResult<PathBuf> {
        match (explicit, &args.input) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => Err(CliError::new(
                Status::Io,
                format!("no input for {name}: pass --input DIR or the file explicitly"),
            )),
        }
    };
    let scene_path = pick(&args.scene, SCENE_FILE)?;
    let seg_path = pick(&args.seg, SEG_FILE)?;
    let field_path = pick(&args.field, FIELD_FILE)?;
    let conf_path = pick(&args.conf, CONF_FILE)?;
    for p in [&scene_path, &seg_path, &field_path, &conf_path] {
        if !p.is_file() {
            return Err(io_error(p, "no such file"));
        }
    }
    let scene = load_scene(&scene_path)?;
    let models = load_models(&scene, &scene_path)?;
    let seg_map = read_map(&seg_path)?;
    let seg = if args.seg_logits {
        temperature_softmax(&seg_map, args.tau)?
    } else {
        SoftSegmentation::new(seg_map).map_err(|e| CliError::from(e).with_path(&seg_path))?
    };
    let field = read_map(&field_path)?;
    let raw_conf = read_map(&conf_path)?;
    let (h, w) = scene.image_size;
    if (seg.height(), seg.width()) != (h, w) {
        return Err(CliError::new(
            Status::Shape,
            format!("segmentation is {}x{}, scene image is {h}x{w}", seg.height(), seg.width()),
        ));
    }
    Ok(Inputs {
        scene,
        models,
        seg,
        field,
        raw_conf,
    })
}
