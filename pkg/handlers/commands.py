import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from augmentation import augment_sample
from config import PipelineConfig, SamplerConfig
from constants import (
    ABLATE_FILES,
    ABLATION_CELL_DIR,
    ABLATION_DEFAULT_CELL,
    AIR_NORMALIZED,
    AUGMENT_DIR,
    DDIM_STEPS_3D,
    EVALUATE_FILES,
    PHANTOM_FILES,
    REGISTER_FILES,
    SEGMENT_FILES,
    TRANSLATE_FILE,
    TWO_POINT_MISSING_SPINOUS,
)
from denoisers import ExternalPredictionDenoiser, GaussianPosteriorOracle, SingleTargetOracle, ZeroDenoiser
from diffusion import DiffusionSchedule, cached_schedule, sample
from errors import ConfigError, SegmentationError
from jobs import JobPool, spawn_generators
from metrics import aggregate_dice, dice, image_metrics, paired_ttest, psnr_from_mse, spine_mask, worst_p
from models import IntensitySpace, LabelVolume, Landmark, LandmarkSet, RigidTransform, Volume
from nifti_io import load_volume, save_volume
from phantom import generate_phantom, misalign, vertebra_layout
from registration import (
    apply_rigid,
    extract_centroids,
    fit_rigid,
    perturb_landmarks,
    read_landmarks,
    regenerate_landmarks,
    write_landmarks,
)
from reports import (
    AblationReport,
    AblationRow,
    DiceRow,
    FitReport,
    ImageMetricRow,
    MethodSummary,
    MetricsReport,
    TTestRow,
    write_json,
    write_table,
)
from segmentation import ThresholdSegmenter, exclude_unsupported, match_labels, unsupported_labels
from volume_ops import (
    coordinate_ramps,
    crop_window_2d,
    denormalize_ct,
    normalize_ct,
    normalize_mr,
    pad_2d,
    pad_to_multiple,
    patch_3d,
    resample,
    slice_sagittal,
    stitch_2d,
    stitch_3d,
    tile_windows_2d,
    unpad,
)

logger = logging.getLogger(__name__)

IMAGE_METRICS = ("l1", "mse", "psnr", "ssim", "vifp")


@dataclass(frozen=True)
class TileJob:
    index: int
    condition: np.ndarray
    target: Optional[np.ndarray]
    shape: Tuple[int, ...]


def _output_dir(config: PipelineConfig) -> Path:
    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ct_datatype(volume: Volume) -> str:
    return "int16" if volume.intensity_space is IntensitySpace.HU else "float32"


def _normalized_ct(volume: Volume) -> Volume:
    return normalize_ct(volume) if volume.intensity_space is IntensitySpace.HU else volume


def _normalized_mr(volume: Volume) -> Volume:
    return normalize_mr(volume) if volume.intensity_space is IntensitySpace.MR_RAW else volume


def _on_grid(volume, reference):
    if volume.geometry.matches(reference.geometry):
        return volume
    logger.info(f"Resampling {volume.shape} onto the reference grid {reference.shape}")
    return resample(volume, target_grid=reference.geometry)


def cmd_phantom(config: PipelineConfig, pool: JobPool) -> Dict[str, Path]:
    out = _output_dir(config)
    cfg = config.phantom.model_copy(update={"seed": config.seed})
    mr, truth_ct, labels, subregions = generate_phantom(cfg)
    ct = truth_ct
    jitter_rng, _ = spawn_generators(config.seed, 2)

    mr_landmarks = perturb_landmarks(extract_centroids(labels, subregions), cfg.landmark_jitter_mm, jitter_rng)
    ct_labels, ct_subregions = labels, subregions
    if cfg.misalign_degrees or any(cfg.misalign_translation):
        column_centre = np.mean([v.body_center for v in vertebra_layout(cfg)], axis=0)
        transform = RigidTransform.about_axis(
            (0.0, 0.0, 1.0), cfg.misalign_degrees, column_centre, cfg.misalign_translation
        )
        ct, ct_labels, ct_subregions = misalign(ct, labels, transform, subregions)
        logger.info(f"Misaligned CT by {cfg.misalign_degrees} deg and {cfg.misalign_translation} mm")

    written = {key: out / name for key, name in PHANTOM_FILES.items()}
    save_volume(mr, written["mr"])
    save_volume(ct, written["ct"], "int16")
    save_volume(ct_labels, written["ct_labels"])
    save_volume(ct_subregions, written["ct_subregions"])
    save_volume(labels, written["mr_labels"])
    save_volume(subregions, written["mr_subregions"])
    write_landmarks(mr_landmarks, written["mr_landmarks"])

    if cfg.augment_copies:
        spec = config.preprocessing.deform.model_copy(update={"seed": config.seed})
        copies = augment_sample(
            mr,
            truth_ct,
            labels,
            subregions,
            spec,
            cfg.augment_copies,
            config.preprocessing.jitter_brightness,
            config.preprocessing.jitter_contrast,
        )
        for k, copy in enumerate(copies):
            for key, volume in copy._asdict().items():
                path = out / AUGMENT_DIR / f"{k:02d}_{key}.nii.gz"
                save_volume(volume, path, "int16" if key == "ct" else None)
                written[f"augmented_{k:02d}_{key}"] = path

    logger.info(f"Phantom written to {out}")
    return written


def _ct_landmarks(config: PipelineConfig):
    if config.paths.ct_landmarks is not None:
        return read_landmarks(config.paths.ct_landmarks)
    labels = load_volume(config.paths.ct_labels, kind="label")
    subregions = load_volume(config.paths.ct_subregions, kind="label") if config.paths.ct_subregions else None
    return extract_centroids(labels, subregions)


def _moved_landmarks(landmarks: LandmarkSet, transform: RigidTransform) -> LandmarkSet:
    return LandmarkSet(
        tuple(
            Landmark(
                entry.vertebra_id,
                transform.apply(entry.body),
                transform.apply(entry.spinous) if entry.spinous is not None else None,
            )
            for entry in landmarks
        )
    )


def cmd_register(config: PipelineConfig, pool: JobPool) -> Dict[str, Path]:
    mode = config.registration.mode
    mr = load_volume(config.paths.mr, kind="scalar")
    ct = load_volume(config.paths.ct, kind="scalar")
    ct_labels = load_volume(config.paths.ct_labels, kind="label") if config.paths.ct_labels else None
    ct_subregions = load_volume(config.paths.ct_subregions, kind="label") if config.paths.ct_subregions else None

    if mode == "none":
        transform = RigidTransform()
        report = FitReport(
            mode=mode,
            n_points=0,
            rms=0.0,
            collinear=False,
            rotation=transform.rotation.tolist(),
            translation=transform.translation.tolist(),
        )
        ct_landmarks = None
    else:
        mr_landmarks = read_landmarks(config.paths.mr_landmarks)
        ct_landmarks = _ct_landmarks(config)
        if mode == "two-point":
            matched = sorted(set(mr_landmarks.ids) & set(ct_landmarks.ids))
            missing = [
                vid
                for vid in matched
                if mr_landmarks.get(vid).spinous is None or ct_landmarks.get(vid).spinous is None
            ]
            if missing:
                raise ConfigError(TWO_POINT_MISSING_SPINOUS.format(ids=missing))
        transform, report = fit_rigid(ct_landmarks, mr_landmarks, mode)

    out = _output_dir(config)
    written = {"ct": out / REGISTER_FILES["ct"], "report": out / REGISTER_FILES["report"]}
    if mode == "none":
        save_volume(ct, written["ct"], _ct_datatype(ct))
    else:
        save_volume(apply_rigid(ct, transform, mr.geometry), written["ct"], _ct_datatype(ct))
    for key, volume in (("ct_labels", ct_labels), ("ct_subregions", ct_subregions)):
        if volume is None:
            continue
        written[key] = out / REGISTER_FILES[key]
        save_volume(volume if mode == "none" else apply_rigid(volume, transform, mr.geometry), written[key])
    if ct_landmarks is not None:
        written["ct_landmarks"] = out / REGISTER_FILES["ct_landmarks"]
        write_landmarks(_moved_landmarks(ct_landmarks, transform), written["ct_landmarks"])
    write_json(report, written["report"])
    logger.info(f"Registration ({mode}) done: RMS {report.rms:.4f} mm, collinear={report.collinear}")
    return written


def cmd_segment(config: PipelineConfig, pool: JobPool) -> Dict[str, Path]:
    ct = load_volume(config.paths.segment_input, kind="scalar")
    labels, subregions = ThresholdSegmenter.from_config(config.evaluation)(ct)
    landmarks = regenerate_landmarks(labels, subregions)

    out = _output_dir(config)
    written = {key: out / name for key, name in SEGMENT_FILES.items()}
    save_volume(labels, written["labels"])
    save_volume(subregions, written["subregions"])
    write_landmarks(landmarks, written["landmarks"])
    return written


def _make_denoiser(config: PipelineConfig, sched: DiffusionSchedule, job: TileJob):
    mode = config.sampler.mode
    if config.denoiser == "single-target":
        return SingleTargetOracle(job.target, mode, sched)
    if config.denoiser == "gaussian-posterior":
        return GaussianPosteriorOracle(config.oracle.mu, config.oracle.s, mode, sched)
    if config.denoiser == "zero":
        return ZeroDenoiser(mode)
    return ExternalPredictionDenoiser(config.paths.predictions_dir, mode, job.index)


def _sample_tiles(config: PipelineConfig, sampler: SamplerConfig, jobs: List[TileJob], pool: JobPool) -> List[np.ndarray]:
    sched = cached_schedule(sampler.T, sampler.s)

    def run(job: TileJob, rng: np.random.Generator) -> np.ndarray:
        denoiser = _make_denoiser(config, sched, job)
        return sample(denoiser, job.condition, job.shape, sampler, sched, rng)

    return pool.map(run, jobs, config.seed)


def _translate_2d(config: PipelineConfig, mr: Volume, target: Optional[Volume], pool: JobPool) -> np.ndarray:
    size = config.preprocessing.crop_size
    stride = config.preprocessing.tile_stride
    jobs: List[TileJob] = []
    layout = []
    for x in range(mr.shape[0]):
        image = pad_2d(mr.data[x], size, AIR_NORMALIZED)
        target_image = pad_2d(target.data[x], size, AIR_NORMALIZED) if target is not None else None
        windows = tile_windows_2d(image.shape, size, stride)
        for window in windows:
            jobs.append(
                TileJob(
                    index=len(jobs),
                    condition=image[window],
                    target=target_image[window] if target_image is not None else None,
                    shape=tuple(size),
                )
            )
        layout.append((image.shape, windows))
    logger.info(f"Translating {mr.shape[0]} sagittal slices as {len(jobs)} tiles")
    tiles = _sample_tiles(config, config.sampler, jobs, pool)

    out = np.empty(mr.shape)
    cursor = 0
    for x, (padded_shape, windows) in enumerate(layout):
        pieces = list(zip(tiles[cursor : cursor + len(windows)], windows))
        cursor += len(windows)
        out[x] = stitch_2d(pieces, padded_shape)[: mr.shape[1], : mr.shape[2]]
    return out


def _pad_for_patches(volume: Volume, patch) -> Volume:
    short = [max(p - n, 0) for n, p in zip(volume.shape, patch)]
    if not any(short):
        return volume
    return volume.with_data(np.pad(volume.data, [(0, s) for s in short], constant_values=AIR_NORMALIZED))


def _translate_3d(config: PipelineConfig, mr: Volume, target: Optional[Volume], pool: JobPool) -> np.ndarray:
    prep = config.preprocessing
    sampler = config.sampler
    if "steps" not in sampler.model_fields_set:
        sampler = sampler.model_copy(update={"steps": DDIM_STEPS_3D})

    iso = resample(mr, prep.iso_spacing)
    padded, record = pad_to_multiple(iso, prep.pad_multiple)
    padded = _pad_for_patches(padded, prep.patch_size)
    target_padded = None
    if target is not None:
        target_iso, _ = pad_to_multiple(resample(target, prep.iso_spacing), prep.pad_multiple)
        target_padded = _pad_for_patches(target_iso, prep.patch_size)

    patches = patch_3d(padded, prep.patch_size, prep.patch_stride)
    jobs = []
    for index, (patch, window) in enumerate(patches):
        condition = np.concatenate([patch.data[None], coordinate_ramps(padded.shape, window)])
        jobs.append(
            TileJob(
                index=index,
                condition=condition,
                target=target_padded.data[window] if target_padded is not None else None,
                shape=patch.shape,
            )
        )
    logger.info(f"Translating volume {mr.shape} as {len(jobs)} patches of {tuple(prep.patch_size)}")
    tiles = _sample_tiles(config, sampler, jobs, pool)

    stitched = stitch_3d(list(zip(tiles, [w for _, w in patches])), padded.shape)
    stitched = padded.with_data(np.clip(stitched, -1.0, 1.0))
    return resample(unpad(stitched, record), target_grid=mr.geometry).data


def cmd_translate(config: PipelineConfig, pool: JobPool) -> Dict[str, Path]:
    mr = _normalized_mr(load_volume(config.paths.mr, kind="scalar"))
    target = None
    if config.denoiser == "single-target":
        target = _on_grid(_normalized_ct(load_volume(config.paths.reference_ct, kind="scalar")), mr)

    if config.preprocessing.recipe == "2d":
        data = _translate_2d(config, mr, target, pool)
    else:
        data = _translate_3d(config, mr, target, pool)

    synthesized = denormalize_ct(Volume.on_grid(np.clip(data, -1.0, 1.0), mr.geometry, IntensitySpace.NORMALIZED))
    path = _output_dir(config) / TRANSLATE_FILE
    save_volume(synthesized, path)
    logger.info(f"Synthesized CT written to {path}")
    return {"synth_ct": path}


@dataclass
class _MethodResult:
    rows: List[ImageMetricRow]
    dice_all: list
    dice_posterior: list


def _segment_or_empty(config: PipelineConfig, synthesized: Volume) -> Tuple[LabelVolume, LabelVolume]:
    try:
        return ThresholdSegmenter.from_config(config.evaluation)(synthesized)
    except SegmentationError as e:
        logger.warning(f"Segmentation of the synthesized CT failed ({e}); scoring it as empty")
        empty = LabelVolume.on_grid(np.zeros(synthesized.shape, dtype=np.int16), synthesized.geometry)
        return empty, empty


def _paired_rows(pair: str, metric: str, x: List[float], y: List[float]) -> List[TTestRow]:
    finite = [(a, b) for a, b in zip(x, y) if np.isfinite(a) and np.isfinite(b)]
    if len(finite) < 2:
        logger.warning(f"Skipping {metric} t-test for {pair}: fewer than 2 finite pairs")
        return []
    result = paired_ttest([a for a, _ in finite], [b for _, b in finite])
    return [TTestRow(pair=pair, metric=metric, t=result.t, p=result.p, n=result.n)]


def evaluate_methods(config: PipelineConfig, methods: Dict[str, Path]) -> Tuple[MetricsReport, Dict[str, _MethodResult]]:
    evaluation = config.evaluation
    reference = _normalized_ct(load_volume(config.paths.reference_ct, kind="scalar"))
    reference_labels = load_volume(config.paths.reference_labels, kind="label")
    reference_sub = None
    if config.paths.reference_subregions is not None:
        reference_sub = load_volume(config.paths.reference_subregions, kind="label")
    volume_id = Path(config.paths.reference_ct).name.split(".")[0]

    excluded = unsupported_labels(reference_labels, evaluation.exclusion)
    scored_labels = exclude_unsupported(reference_labels, evaluation.exclusion)

    # one crop per labelled slice, shared by every method so the t-tests are paired
    size = tuple(config.preprocessing.crop_size)
    slices = slice_sagittal(reference, reference_labels)
    crop_rng = np.random.default_rng(config.seed)
    crops = [
        crop_window_2d(tuple(max(n, s) for n, s in zip(item.image.shape, size)), size, crop_rng) for item in slices
    ]

    results: Dict[str, _MethodResult] = {}
    report = MetricsReport()
    for method in sorted(methods):
        synthesized = _on_grid(_normalized_ct(load_volume(methods[method], kind="scalar")), reference)
        rows = []
        for crop_id, (item, window) in enumerate(zip(slices, crops)):
            labels_crop = pad_2d(item.labels, size, 0)[window]
            ref_crop = spine_mask(pad_2d(item.image, size, AIR_NORMALIZED)[window], labels_crop, evaluation.mask_radius)
            syn_crop = spine_mask(
                pad_2d(synthesized.data[item.index], size, AIR_NORMALIZED)[window], labels_crop, evaluation.mask_radius
            )
            values = image_metrics(ref_crop, syn_crop, evaluation.psnr_peak)
            rows.append(ImageMetricRow(method=method, volume_id=volume_id, crop_id=crop_id, slice_index=item.index, **values))

        seg, seg_sub = _segment_or_empty(config, synthesized)
        matched = match_labels(seg, reference_labels)
        matched = matched.with_data(np.where(np.isin(matched.data, excluded), 0, matched.data).astype(matched.data.dtype))
        dice_all = dice(scored_labels, matched, "all", volume_id=volume_id, method=method)
        dice_posterior = []
        if evaluation.posterior and reference_sub is not None:
            dice_posterior = dice(scored_labels, matched, "posterior", reference_sub, seg_sub, volume_id, method)

        results[method] = _MethodResult(rows, dice_all, dice_posterior)
        report.images.extend(rows)
        report.dice.extend(dice_all + dice_posterior)
        report.summaries.append(_summarize(method, rows, dice_all, dice_posterior, evaluation.psnr_peak))

    for a, b in combinations(sorted(results), 2):
        pair = f"{a} vs {b}"
        for metric in IMAGE_METRICS:
            x = [getattr(row, metric) for row in results[a].rows]
            y = [getattr(row, metric) for row in results[b].rows]
            report.ttests.extend(_paired_rows(pair, metric, x, y))
        for subset, attr in (("all", "dice_all"), ("posterior", "dice_posterior")):
            x = {row.vertebra_id: row.dice for row in getattr(results[a], attr)}
            y = {row.vertebra_id: row.dice for row in getattr(results[b], attr)}
            ids = sorted(set(x) & set(y))
            report.ttests.extend(_paired_rows(pair, f"dice_{subset}", [x[i] for i in ids], [y[i] for i in ids]))
    if report.ttests:
        report.worst_p = worst_p([row.p for row in report.ttests])
    return report, results


def _summarize(method: str, rows: List[ImageMetricRow], dice_all, dice_posterior, peak: float) -> MethodSummary:
    if not rows:
        raise SegmentationError("No labelled sagittal slice to evaluate", "empty-reference")
    means = {metric: float(np.mean([getattr(row, metric) for row in rows])) for metric in IMAGE_METRICS}
    pooled = psnr_from_mse(means["mse"], peak)
    return MethodSummary(
        method=method,
        n_crops=len(rows),
        l1=means["l1"],
        mse=means["mse"],
        psnr=means["psnr"],
        psnr_of_mean_mse=pooled,
        jensen_holds=bool(means["psnr"] >= pooled - 1e-9),
        ssim=means["ssim"],
        vifp=means["vifp"],
        dice_per_volume=aggregate_dice(dice_all, "per-volume") if dice_all else None,
        dice_per_vertebra=aggregate_dice(dice_all, "per-vertebra") if dice_all else None,
        dice_posterior_per_volume=aggregate_dice(dice_posterior, "per-volume") if dice_posterior else None,
        dice_posterior_per_vertebra=aggregate_dice(dice_posterior, "per-vertebra") if dice_posterior else None,
    )


def _write_metrics(report: MetricsReport, out: Path) -> Dict[str, Path]:
    written = {key: out / name for key, name in EVALUATE_FILES.items()}
    write_table(report.images, written["images"], list(ImageMetricRow.model_fields))
    write_table(report.dice, written["dice"], list(DiceRow.model_fields))
    write_table(report.ttests, written["ttests"], list(TTestRow.model_fields))
    write_json(report, written["summary"])
    return written


def cmd_evaluate(config: PipelineConfig, pool: JobPool) -> Dict[str, Path]:
    report, _ = evaluate_methods(config, dict(config.paths.methods))
    for summary in report.summaries:
        logger.info(
            f"{summary.method}: PSNR {summary.psnr:.2f} dB (pooled {summary.psnr_of_mean_mse:.2f}), "
            f"SSIM {summary.ssim:.4f}, Dice {summary.dice_per_vertebra}"
        )
    return _write_metrics(report, _output_dir(config))


def _cell_configs(config: PipelineConfig) -> List[Tuple[Tuple[int, float, float], PipelineConfig]]:
    cells = []
    base = config.sampler.model_dump()
    for steps in config.ablation.steps:
        for eta in config.ablation.etas:
            for w in config.ablation.ws:
                try:
                    sampler = SamplerConfig.model_validate(
                        {**base, "steps": steps, "eta": eta, "guidance_w": w, "sampler": "ddim"}
                    )
                except ValueError as e:
                    raise ConfigError(f"Ablation cell steps={steps}, eta={eta}, w={w} is invalid: {e}") from e
                cell_dir = Path(config.paths.output_dir) / ABLATION_CELL_DIR.format(steps=steps, eta=eta, w=w)
                paths = config.paths.model_copy(update={"output_dir": cell_dir})
                cells.append(((steps, eta, w), config.model_copy(update={"sampler": sampler, "paths": paths})))
    if not cells:
        raise ConfigError("The ablation grid is empty")
    return cells


def cmd_ablate(config: PipelineConfig, pool: JobPool) -> Dict[str, Path]:
    cells = _cell_configs(config)
    keys = [key for key, _ in cells]
    default_key = ABLATION_DEFAULT_CELL if ABLATION_DEFAULT_CELL in keys else keys[0]

    psnr_by_cell: Dict[tuple, List[float]] = {}
    rows: List[AblationRow] = []
    for key, cell in cells:
        steps, eta, w = key
        logger.info(f"Ablation cell steps={steps} eta={eta} w={w}")
        synth = cmd_translate(cell, pool)["synth_ct"]
        name = f"steps{steps}_eta{eta:g}_w{w:g}"
        report, _ = evaluate_methods(cell, {name: synth})
        _write_metrics(report, Path(cell.paths.output_dir))
        summary = report.summaries[0]
        psnr_by_cell[key] = [row.psnr for row in report.images]
        rows.append(
            AblationRow(
                steps=steps,
                eta=eta,
                w=w,
                is_default=key == default_key,
                l1=summary.l1,
                mse=summary.mse,
                psnr=summary.psnr,
                ssim=summary.ssim,
                vifp=summary.vifp,
                dice_all=summary.dice_per_vertebra,
                dice_posterior=summary.dice_posterior_per_vertebra,
            )
        )

    p_values = []
    for row, key in zip(rows, keys):
        if key == default_key:
            continue
        tests = _paired_rows("vs default", "psnr", psnr_by_cell[key], psnr_by_cell[default_key])
        if tests:
            row.t_vs_default = tests[0].t
            row.p_vs_default = tests[0].p
            p_values.append(tests[0].p)

    ablation = AblationReport(rows=rows, worst_p=worst_p(p_values) if p_values else None)
    out = _output_dir(config)
    written = {key: out / name for key, name in ABLATE_FILES.items()}
    write_table(rows, written["table"], list(AblationRow.model_fields))
    write_json(ablation, written["summary"])
    return written


COMMANDS = {
    "phantom": cmd_phantom,
    "register": cmd_register,
    "segment": cmd_segment,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}
