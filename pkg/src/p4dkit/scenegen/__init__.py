from .geometry import camera_center, intrinsics_matrix, plucker_rays, project, rotation_yaw_pitch
from .overlay import GLYPH_H, GLYPH_W, glyph_anchors, overlay_pixels, overlay_regions
from .scene import (
    MODALITIES,
    MODALITY_CHANNELS,
    CameraSpec,
    ObjectSpec,
    SceneConfig,
    SceneError,
    SceneMeta,
    SceneSpec,
    SignalSet,
    VideoTensor,
    generate_scene,
    sample_scene_spec,
    scene_from_record,
    scene_to_record,
)
from .vqa import (
    CATEGORIES,
    CATEGORY_SPLIT,
    DEFAULT_TEMPLATES,
    NUMERIC_MULTIPLIERS,
    VQASample,
    format_numeral,
    make_vqa,
    numeric_options,
    read_jsonl,
    rle_decode,
    rle_encode,
    write_jsonl,
)
