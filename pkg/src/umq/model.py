"""End-to-end model: encoders -> quality estimation -> decoupling ->
baseline -> enhancement -> fusion -> quality-aware expert routing ->
prediction, plus the composite training objective.

The forward pass never mutates persistent state; it returns the proposed
baseline buffers, which the training loop commits after the optimizer
step. Every stochastic site derives its stream from the step seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import corruption as C
from . import decouple as D
from . import enhancer as EH
from . import estimator as E
from . import moe as M
from . import tensor as T
from .config import UMQConfig
from .dataio import FeatureBatch, ModalityEncoderParams, encode, init_encoder
from .rng import Rng, derive_seed


class PipelineNumericError(FloatingPointError):
    """A non-finite intermediate, tagged with the pipeline stage."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite values at stage '{stage}'")
        self.stage = stage


def _check_finite(stage: str, *tensors: T.Tensor) -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise PipelineNumericError(stage)


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * bound


@dataclass
class MLPParams:
    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor

    def forward(self, x: T.Tensor) -> T.Tensor:
        hidden = T.relu(x @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2


def _init_mlp(d_in: int, d_hidden: int, d_out: int, seed: int, dtype) -> MLPParams:
    rng = Rng(seed)
    return MLPParams(
        w1=T.parameter(_glorot(rng, d_in, d_hidden), dtype),
        b1=T.parameter(np.zeros((1, d_hidden)), dtype),
        w2=T.parameter(_glorot(rng, d_hidden, d_out), dtype),
        b2=T.parameter(np.zeros((1, d_out)), dtype),
    )


@dataclass
class AblationFlags:
    quality_estimation: bool = True
    rank_guided: bool = True
    quality_enhancement: bool = True
    modality_decoupling: bool = True
    modality_specific: bool = True
    sample_specific: bool = True
    mqmoe: bool = True
    l_same: bool = True

    @classmethod
    def from_switch(cls, switch: str) -> "AblationFlags":
        flags = cls()
        mapping = {
            "": None,
            "wo_quality_estimation": "quality_estimation",
            "wo_rank_guided_training": "rank_guided",
            "wo_quality_enhancement": "quality_enhancement",
            "wo_modality_decoupling": "modality_decoupling",
            "wo_modality_specific": "modality_specific",
            "wo_sample_specific": "sample_specific",
            "wo_mqmoe": "mqmoe",
            "wo_l_same": "l_same",
        }
        attr = mapping[switch]
        if attr is not None:
            setattr(flags, attr, False)
        return flags


@dataclass
class ForwardResult:
    prediction: T.Tensor  # [n]
    encoded: dict[str, T.Tensor]
    alpha: dict[str, T.Tensor]  # [n] each
    sample_parts: dict[str, T.Tensor]
    shared_parts: dict[str, T.Tensor]
    baselines: dict[str, T.Tensor]
    new_buffers: dict[str, np.ndarray]
    enhanced: dict[str, T.Tensor]
    fused: T.Tensor
    gate_logits: T.Tensor | None
    selection: np.ndarray | None  # [n x h] bool
    levels: np.ndarray | None  # [n x |M|] quality configuration
    training: bool
    step_seed: int


@dataclass
class LossReport:
    """Named scalar components of the composite objective."""

    components: dict[str, float]
    total: float

    def get(self, name: str) -> float | None:
        return self.components.get(name)


def recompute_total(report: LossReport, cfg: UMQConfig) -> float:
    """The linearity identity: total from named components and weights."""
    comp = report.components
    group = lambda prefix: sum(v for k, v in comp.items() if k.startswith(prefix))
    return (comp["task"]
            + cfg.decouple_loss_weight * group("de_")
            + cfg.estimator_loss_weight * group("est_")
            + cfg.enhancer_loss_weight * group("eh.")
            + cfg.moe_loss_weight * group("moe_"))


class UMQModel:
    """All trainable parameters and the forward/loss computation."""

    def __init__(self, cfg: UMQConfig, modality_dims: dict[str, int], task: str,
                 dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.task = task
        self.dtype = dtype
        self.modality_dims = dict(modality_dims)
        self.modalities = list(modality_dims)
        self.flags = AblationFlags.from_switch(cfg.ablation)
        d = cfg.shared_dim
        seed = derive_seed(cfg.seed, "init")

        self.encoders: dict[str, ModalityEncoderParams] = init_encoder(
            modality_dims, d, derive_seed(seed, "encoders"), dtype)
        self.estimators: dict[str, E.EstimatorParams] = {}
        self.predictors: dict[str, E.UnimodalPredictorParams] = {}
        self.decouplers: dict[str, D.DecoupleParams] = {}
        self.couplers: dict[str, D.CoupleParams] = {}
        self.states: dict[str, D.ModalityState] = {}
        self.enhancers: dict[str, EH.EnhancerParams] = {}
        for name in self.modalities:
            mseed = derive_seed(seed, "modality", name)
            if self.flags.quality_estimation:
                self.estimators[name] = E.init_estimator(d, mseed, dtype)
                self.predictors[name] = E.init_predictor(d, mseed, dtype)
            if self.flags.modality_decoupling:
                self.decouplers[name] = D.init_decouple(d, mseed, dtype)
                self.couplers[name] = D.init_couple(d, mseed, dtype)
            if self.flags.quality_enhancement:
                if self.flags.modality_specific:
                    self.states[name] = D.init_state(d, mseed, cfg.ema_coeff, dtype)
                self.enhancers[name] = EH.init_enhancer(d, mseed, dtype)

        n_mod = len(self.modalities)
        self.fusion = _init_mlp(n_mod * d, 2 * d, d, derive_seed(seed, "fusion"), dtype)
        if self.flags.mqmoe:
            self.moe = M.init_moe(d, cfg.num_experts, cfg.selected_experts,
                                  derive_seed(seed, "moe"), dtype)
            self.shared_expert = None
        else:
            self.moe = None
            self.shared_expert = M.init_expert(d, derive_seed(seed, "shared-expert"), dtype)
        self.head = _init_mlp(d, max(d // 2, 1), 1, derive_seed(seed, "head"), dtype)

    # ------------------------------------------------------------ params

    def named_params(self) -> list[tuple[str, T.Tensor]]:
        out: list[tuple[str, T.Tensor]] = []

        def mlp(prefix: str, p) -> None:
            out.extend([(f"{prefix}.w1", p.w1), (f"{prefix}.b1", p.b1),
                        (f"{prefix}.w2", p.w2), (f"{prefix}.b2", p.b2)])

        for name in self.modalities:
            enc = self.encoders[name]
            out.extend([(f"encoder.{name}.weight", enc.weight),
                        (f"encoder.{name}.bias", enc.bias),
                        (f"encoder.{name}.ln_scale", enc.ln_scale),
                        (f"encoder.{name}.ln_shift", enc.ln_shift)])
            if name in self.estimators:
                mlp(f"estimator.{name}", self.estimators[name])
                mlp(f"predictor.{name}", self.predictors[name])
            if name in self.decouplers:
                dec = self.decouplers[name]
                out.extend([(f"decouple.{name}.hidden_w", dec.hidden_w),
                            (f"decouple.{name}.hidden_b", dec.hidden_b),
                            (f"decouple.{name}.sample_w", dec.sample_w),
                            (f"decouple.{name}.sample_b", dec.sample_b),
                            (f"decouple.{name}.shared_w", dec.shared_w),
                            (f"decouple.{name}.shared_b", dec.shared_b)])
                cpl = self.couplers[name]
                out.extend([(f"couple.{name}.hidden_w", cpl.hidden_w),
                            (f"couple.{name}.hidden_b", cpl.hidden_b),
                            (f"couple.{name}.out_w", cpl.out_w),
                            (f"couple.{name}.out_b", cpl.out_b)])
            if name in self.states:
                out.append((f"baseline_bias.{name}", self.states[name].bias))
            if name in self.enhancers:
                enh = self.enhancers[name]
                out.extend([(f"enhancer.{name}.query", enh.query),
                            (f"enhancer.{name}.key_w", enh.key_w),
                            (f"enhancer.{name}.value_w", enh.value_w),
                            (f"enhancer.{name}.mlp_w1", enh.mlp_w1),
                            (f"enhancer.{name}.mlp_b1", enh.mlp_b1),
                            (f"enhancer.{name}.mlp_w2", enh.mlp_w2),
                            (f"enhancer.{name}.mlp_b2", enh.mlp_b2)])
        mlp("fusion", self.fusion)
        if self.moe is not None:
            out.append(("moe.gate_w", self.moe.gate_w))
            for j, expert in enumerate(self.moe.experts):
                mlp(f"moe.expert{j}", expert)
        else:
            mlp("shared_expert", self.shared_expert)
        mlp("head", self.head)
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"baseline.{name}": state.baseline for name, state in self.states.items()}

    def commit_baselines(self, new_buffers: dict[str, np.ndarray]) -> None:
        for name, value in new_buffers.items():
            self.states[name].baseline = value.astype(self.dtype)

    # ----------------------------------------------------------- forward

    def forward(self, batch: FeatureBatch, training: bool, step_seed: int = 0,
                rep_affine: dict[str, tuple[np.ndarray, np.ndarray]] | None = None
                ) -> ForwardResult:
        """Full pipeline on one batch.

        `rep_affine` optionally maps modality name to a constant (scale,
        offset) pair applied to the encoded representation; this is how
        evaluation-protocol noise enters without breaking gradient flow.
        """
        cfg = self.cfg
        flags = self.flags
        n = batch.size

        encoded: dict[str, T.Tensor] = {}
        for name in self.modalities:
            x = encode(batch.features[name], self.encoders[name])
            if rep_affine is not None and name in rep_affine:
                scale, offset = rep_affine[name]
                x = x * T.Tensor(scale.astype(x.data.dtype)) + T.Tensor(
                    offset.astype(x.data.dtype))
            encoded[name] = x
        _check_finite("encode", *encoded.values())

        alpha: dict[str, T.Tensor] = {}
        for name in self.modalities:
            if flags.quality_estimation:
                alpha[name] = E.estimate(encoded[name], self.estimators[name])
            else:
                alpha[name] = T.Tensor(np.ones(n, dtype=self.dtype))
        _check_finite("estimate", *alpha.values())

        sample_parts: dict[str, T.Tensor] = {}
        shared_parts: dict[str, T.Tensor] = {}
        if flags.modality_decoupling:
            for name in self.modalities:
                x_s, x_c = D.decouple(encoded[name], self.decouplers[name])
                sample_parts[name] = x_s
                shared_parts[name] = x_c
            _check_finite("decouple", *sample_parts.values(), *shared_parts.values())
        else:
            # without decoupling the raw representation is the cross-modal cue
            sample_parts = dict(encoded)
            shared_parts = dict(encoded)

        baselines: dict[str, T.Tensor] = {}
        new_buffers: dict[str, np.ndarray] = {}
        if flags.quality_enhancement and flags.modality_specific:
            for name in self.modalities:
                if training:
                    x_b, buf = D.baseline_update(self.states[name], shared_parts[name])
                    baselines[name] = x_b
                    new_buffers[name] = buf
                else:
                    baselines[name] = D.baseline_read(self.states[name],
                                                      encoded[name].data.dtype)
            _check_finite("baseline", *baselines.values())

        enhanced: dict[str, T.Tensor] = {}
        if flags.quality_enhancement:
            for name in self.modalities:
                cross = self._cross_tokens(name, sample_parts, alpha, n)
                x_bar, _ = EH.enhance(encoded[name], cross, baselines.get(name),
                                      self.enhancers[name])
                enhanced[name] = x_bar
            _check_finite("enhance", *enhanced.values())
        else:
            enhanced = dict(encoded)

        fused = self.fusion.forward(T.concat([enhanced[m] for m in self.modalities], axis=-1))
        _check_finite("fusion", fused)

        if flags.mqmoe:
            mixed, gate_logits, selection = M.route(fused, self.moe)
            _check_finite("route", mixed, gate_logits)
        else:
            mixed = M.expert_forward(fused, self.shared_expert)
            gate_logits, selection = None, None
            _check_finite("route", mixed)

        prediction = T.reshape(self.head.forward(mixed), (-1,))
        _check_finite("predict", prediction)

        levels = None
        if flags.quality_estimation:
            stacked = np.stack([alpha[m].data for m in self.modalities], axis=-1)
            levels = E.quality_level(stacked, cfg.quality_threshold)

        return ForwardResult(prediction=prediction, encoded=encoded, alpha=alpha,
                             sample_parts=sample_parts, shared_parts=shared_parts,
                             baselines=baselines, new_buffers=new_buffers,
                             enhanced=enhanced, fused=fused, gate_logits=gate_logits,
                             selection=selection, levels=levels, training=training,
                             step_seed=step_seed)

    def _cross_tokens(self, name: str, sample_parts: dict[str, T.Tensor],
                      alpha: dict[str, T.Tensor], n: int) -> list[T.Tensor]:
        if not self.flags.sample_specific:
            return []
        tokens = []
        for other in self.modalities:
            if other == name:
                continue
            a = alpha[other]
            if self.cfg.detach_alpha_in_enhancer:
                a = T.detach(a)
            tokens.append(sample_parts[other] * T.reshape(a, (n, 1)))
        return tokens

    # ------------------------------------------------------------ losses

    def task_loss(self, prediction: T.Tensor, labels: np.ndarray) -> T.Tensor:
        y = T.Tensor(np.asarray(labels, dtype=prediction.data.dtype))
        if self.task == "regression":
            diff = prediction - y
            return T.tmean(diff * diff)
        softplus = T.hinge(prediction) + T.log(1.0 + T.exp(-T.absolute(prediction)))
        return T.tmean(softplus - y * prediction)

    def _augment(self, x: T.Tensor, seed: int) -> T.Tensor:
        """AddNoise as a differentiable affine map with constant draws."""
        cfg = self.cfg
        aug = C.add_noise_augment(x.data, seed, cfg.replace_prob,
                                  cfg.augment_rate_low, cfg.augment_rate_high)
        noise = C.noise_draw(x.shape, C.NoiseKind.GAUSSIAN, aug.noise_seed)
        nr = aug.nr_rows.reshape(-1, 1)
        dt = x.data.dtype
        return (x * T.Tensor((1.0 - nr).astype(dt)) + T.Tensor((nr * noise).astype(dt)))

    def loss_tensors(self, result: ForwardResult, batch: FeatureBatch
                     ) -> tuple[T.Tensor, dict[str, T.Tensor]]:
        """The full objective plus every named component as a live tensor."""
        cfg = self.cfg
        flags = self.flags
        step_seed = result.step_seed
        n = batch.size
        d = cfg.shared_dim
        named: dict[str, T.Tensor] = {}

        total = self.task_loss(result.prediction, batch.labels)
        named["task"] = total

        if flags.modality_decoupling:
            de_sum = None
            for name in self.modalities:
                x = result.encoded[name]
                x_s, x_c = result.sample_parts[name], result.shared_parts[name]
                named[f"de_orth.{name}"] = D.loss_orthogonality(x_s, x_c)
                named[f"de_mi.{name}"] = D.loss_mutual_info(x, x_s, x_c, cfg.similarity_slack)
                named[f"de_center.{name}"] = D.loss_center(x_c)
                named[f"de_recon.{name}"] = D.loss_reconstruction(
                    x, D.couple(x_s, x_c, self.couplers[name]), cfg.reconstruction_squared)
                term = (named[f"de_orth.{name}"] + named[f"de_mi.{name}"]
                        + named[f"de_center.{name}"] + named[f"de_recon.{name}"])
                de_sum = term if de_sum is None else de_sum + term
            total = total + cfg.decouple_loss_weight * de_sum

        if flags.quality_estimation:
            est_sum = None
            for name in self.modalities:
                x = result.encoded[name]
                a = result.alpha[name]
                noise = T.Tensor(C.noise_draw((n, d), C.NoiseKind.GAUSSIAN,
                                              derive_seed(step_seed, "noise-anchor", name)
                                              ).astype(x.data.dtype))
                anchor = E.loss_noise_anchor(noise, self.estimators[name])
                _, sample_losses = E.unimodal_predict_loss(x, batch.labels,
                                                           self.predictors[name], self.task)
                keys = sample_losses.data  # detached ordering keys
                anchor = anchor + E.loss_high_anchor(a, keys, cfg.high_score_target,
                                                     cfg.low_loss_threshold)
                parts = {"anchor": anchor, "task": T.tmean(sample_losses)}
                if flags.rank_guided:
                    corrupted = self._augment(x, derive_seed(step_seed, "augment-est", name))
                    alpha_hat = E.estimate(corrupted, self.estimators[name])
                    parts["corrupt"] = E.loss_corruption_rank(a, alpha_hat, cfg.rank_margin)
                    parts["rank"] = E.loss_rank(a, keys, cfg.rank_margin, cfg.rank_pairs_cap,
                                                derive_seed(step_seed, "rank-cap", name))
                named[f"est_anchor.{name}"] = parts["anchor"]
                named[f"est_task.{name}"] = parts["task"]
                if flags.rank_guided:
                    named[f"est_corrupt.{name}"] = parts["corrupt"]
                    named[f"est_rank.{name}"] = parts["rank"]
                term = E.estimator_total([parts])
                est_sum = term if est_sum is None else est_sum + term
            total = total + cfg.estimator_loss_weight * est_sum

        if flags.quality_enhancement:
            eh_sum = None
            for name in self.modalities:
                x = result.encoded[name]
                corrupted = self._augment(x, derive_seed(step_seed, "augment-eh", name))
                cross = self._cross_tokens(name, result.sample_parts, result.alpha, n)
                restored, _ = EH.enhance(corrupted, cross, result.baselines.get(name),
                                         self.enhancers[name])
                term = EH.enhancer_training_loss(x, restored, result.alpha[name].data,
                                                 cfg.quality_threshold)
                named[f"eh.{name}"] = term
                eh_sum = term if eh_sum is None else eh_sum + term
            total = total + cfg.enhancer_loss_weight * eh_sum

        if flags.mqmoe:
            # the routing losses shape the gate only: same logit values,
            # but no gradient back into the fused representations
            aux_logits = M.gate(T.detach(result.fused), self.moe.gate_w)
            named["moe_balance"] = M.loss_balance(aux_logits)
            named["moe_sample"] = M.loss_sample_variance(aux_logits, cfg.variance_margin)
            moe_sum = named["moe_balance"] + named["moe_sample"]
            if flags.l_same and result.levels is not None:
                named["moe_same"] = M.loss_same_config(aux_logits, result.levels,
                                                       cfg.same_loss_normalize,
                                                       cfg.same_loss_pairs)
                moe_sum = moe_sum + named["moe_same"]
            total = total + cfg.moe_loss_weight * moe_sum

        _check_finite("loss", total)
        return total, named

    def composite_loss(self, result: ForwardResult, batch: FeatureBatch
                       ) -> tuple[T.Tensor, LossReport]:
        """Assemble the full objective on one training forward."""
        total, named = self.loss_tensors(result, batch)
        components = {key: tensor_.item() for key, tensor_ in named.items()}
        return total, LossReport(components=components, total=total.item())
