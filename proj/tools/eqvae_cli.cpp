#include <torch/torch.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "eqvae/dataset.hpp"
#include "eqvae/error.hpp"
#include "eqvae/harness.hpp"
#include "eqvae/probes.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// --config plus one --<key> flag per ExperimentConfig field.
struct ConfigArgs {
  std::string config_path;
  std::map<std::string, std::string> overrides;
  std::string resume;
  bool fresh = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value config file");
    for (const auto& key : eqvae::ExperimentConfig::keys()) {
      cmd->add_option("--" + key, overrides[key], "override " + key);
    }
    cmd->add_option("--resume", resume, "checkpoint to resume from");
    cmd->add_flag("--fresh", fresh, "retrain even if a finished run with the same config exists");
  }

  eqvae::ExperimentConfig build(eqvae::RunMode default_mode) const {
    eqvae::ExperimentConfig cfg;
    cfg.mode = default_mode;
    if (!config_path.empty()) cfg.update_from_file(config_path);
    for (const auto& [key, value] : overrides) {
      if (!value.empty()) cfg.set(key, value);
    }
    return cfg;
  }
};

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string out;
  int64_t max_images = 0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--checkpoint", checkpoint, "autoencoder checkpoint")->required();
    cmd->add_option("--dataset", dataset, "dataset directory (defaults to the checkpoint's)");
    cmd->add_option("--out", out, "output path");
    cmd->add_option("--max-images", max_images, "validation images to use (0 = all)");
  }
};

struct EvalContext {
  eqvae::LoadedAutoencoder ae;
  eqvae::DatasetHandle data;
  torch::Tensor val;
};

EvalContext load_context(const EvalArgs& args) {
  EvalContext ctx;
  ctx.ae = eqvae::load_autoencoder(args.checkpoint);
  if (!args.dataset.empty()) ctx.ae.config.dataset_path = args.dataset;
  ctx.data = eqvae::ingest_dataset(ctx.ae.config.dataset_path, ctx.ae.config.autoencoder.image_size,
                                   ctx.ae.config.split_seed);
  ctx.val = args.max_images > 0 && ctx.data.val.size(0) > args.max_images ? ctx.data.val.slice(0, 0, args.max_images)
                                                                         : ctx.data.val;
  return ctx;
}

void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream(out) << j.dump(2) << "\n";
  std::cout << "wrote " << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"Equivariance-regularised autoencoder experiments"};
  app.require_subcommand(1);

  // gen-data
  eqvae::ShapesCorpusConfig shapes;
  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes corpus");
  gen->add_option("--out", data_out, "output directory")->required();
  gen->add_option("--count", shapes.count, "number of images");
  gen->add_option("--image-size", shapes.image_size, "image side in pixels");
  gen->add_option("--max-shapes", shapes.max_shapes, "maximum shapes per image");
  gen->add_option("--seed", shapes.seed, "random seed");

  ConfigArgs train_args, finetune_args;
  auto* train = app.add_subcommand("train-ae", "train the baseline autoencoder");
  train_args.attach(train);
  auto* finetune = app.add_subcommand("finetune-eqvae", "fine-tune with the equivariance objective (or an ablation)");
  finetune_args.attach(finetune);

  EvalArgs recon_args, eq_args, id_args, pca_args, probe_args;
  auto* recon = app.add_subcommand("eval-recon", "PSNR, SSIM and Frechet proxy on the validation split");
  recon_args.attach(recon);
  auto* equiv = app.add_subcommand("eval-equivariance", "equivariance error over rotations and scales");
  eq_args.attach(equiv);
  auto* idcmd = app.add_subcommand("estimate-id", "TwoNN intrinsic dimension of the latents");
  id_args.attach(idcmd);
  bool whole_latent = false;
  int64_t id_points = 50000;
  idcmd->add_flag("--whole-latent", whole_latent, "one point per image instead of per spatial site");
  idcmd->add_option("--max-points", id_points, "subsample cap");
  auto* pca = app.add_subcommand("visualize-pca", "write top-3 principal component maps of latents");
  pca_args.attach(pca);
  int64_t pca_count = 8;
  pca->add_option("--count", pca_count, "number of images");
  auto* probe = app.add_subcommand("probe-latent-transforms", "Frechet proxy of D(tau E(x)) against tau(x)");
  probe_args.attach(probe);

  std::string ckpt, latents_stem, gen_out, denoiser_path, build_out;
  eqvae::LatentGenConfig lg;
  std::string lg_dataset;
  auto* build = app.add_subcommand("build-latent-dataset", "encode the training split into a latent dataset");
  build->add_option("--checkpoint", ckpt, "autoencoder checkpoint")->required();
  build->add_option("--out", build_out, "output stem (<stem>.bin + <stem>.json)")->required();
  build->add_option("--dataset", lg_dataset, "dataset directory (defaults to the checkpoint's)");

  auto* tlg = app.add_subcommand("train-latentgen", "train a toy denoiser on a latent dataset and score it");
  tlg->add_option("--checkpoint", ckpt, "autoencoder checkpoint providing the decoder")->required();
  tlg->add_option("--latents", latents_stem, "latent dataset stem")->required();
  tlg->add_option("--out", gen_out, "output directory")->required();
  tlg->add_option("--steps", lg.train.steps, "training steps");
  tlg->add_option("--batch-size", lg.train.batch_size, "batch size");
  tlg->add_option("--lr", lg.train.lr, "learning rate");
  tlg->add_option("--seed", lg.train.seed, "training seed");
  tlg->add_option("--width", lg.denoiser.width, "denoiser base width");
  tlg->add_option("--samples", lg.samples, "samples for scoring (>= 500)");
  tlg->add_option("--sample-seed", lg.sample_seed, "sampling seed");
  tlg->add_option("--dataset", lg_dataset, "reference image directory (defaults to the checkpoint's)");

  auto* egen = app.add_subcommand("eval-gen", "score a trained denoiser");
  egen->add_option("--checkpoint", ckpt, "autoencoder checkpoint providing the decoder")->required();
  egen->add_option("--latents", latents_stem, "latent dataset stem (for scale factors)")->required();
  egen->add_option("--denoiser", denoiser_path, "denoiser weights")->required();
  egen->add_option("--samples", lg.samples, "samples (>= 500)");
  egen->add_option("--sample-seed", lg.sample_seed, "sampling seed");
  egen->add_option("--out", gen_out, "output report path");
  egen->add_option("--dataset", lg_dataset, "reference image directory (defaults to the checkpoint's)");

  std::string run_a, run_b, cmp_out;
  auto* cmp = app.add_subcommand("compare", "compare two finished runs");
  cmp->add_option("--a", run_a, "first run directory")->required();
  cmp->add_option("--b", run_b, "second run directory")->required();
  cmp->add_option("--out", cmp_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      eqvae::generate_shapes_corpus(data_out, shapes);
      std::cout << "wrote " << shapes.count << " images to " << data_out << "\n";
    } else if (train->parsed() || finetune->parsed()) {
      const auto& args = train->parsed() ? train_args : finetune_args;
      auto cfg = args.build(train->parsed() ? eqvae::RunMode::kBaselineVae : eqvae::RunMode::kEqvaeFinetune);
      eqvae::RunOptions opts;
      opts.resume_from = args.resume;
      opts.reuse_existing = !args.fresh;
      opts.verbose = true;
      const auto result = eqvae::run_experiment(cfg, opts);
      std::cout << (result.reused ? "reused " : "finished ") << result.run_dir << "\n" << result.report.dump(2) << "\n";
    } else if (recon->parsed()) {
      auto ctx = load_context(recon_args);
      auto feat = eqvae::resolve_feature_net(ctx.ae.config, ctx.data);
      auto x_hat = eqvae::reconstruct(ctx.ae.model, ctx.val);
      json j = {{"psnr", eqvae::psnr(ctx.val, x_hat)},
                {"ssim", eqvae::ssim(ctx.val, x_hat)},
                {"frechet_proxy", eqvae::frechet_distance(
                                      eqvae::FrechetStats::from_features(eqvae::extract_features(feat, x_hat)),
                                      eqvae::FrechetStats::from_features(eqvae::extract_features(feat, ctx.val)))},
                {"n_val", ctx.val.size(0)}};
      emit(j, recon_args.out);
    } else if (equiv->parsed()) {
      auto ctx = load_context(eq_args);
      eqvae::EncoderFn enc = [&](const torch::Tensor& x) { return eqvae::encode_means(ctx.ae.model, x); };
      const int64_t f = ctx.ae.model->compression();
      const auto rot = eqvae::equivariance_error(enc, ctx.val, eqvae::rotation_set(), f);
      const auto scl = eqvae::equivariance_error(enc, ctx.val, eqvae::scale_set(), f);
      json per = rot.per_transform;
      for (const auto& [k, v] : scl.per_transform) per[k] = v;
      emit({{"rotation_mean", rot.rotation_mean}, {"scale_mean", scl.scale_mean}, {"per_transform", per},
            {"n_samples", rot.n_samples}, {"skipped", rot.skipped + scl.skipped}},
           eq_args.out);
    } else if (idcmd->parsed()) {
      auto ctx = load_context(id_args);
      auto z = eqvae::encode_means(ctx.ae.model, ctx.data.train);
      const auto cloud = eqvae::latent_point_cloud(
          z, whole_latent ? eqvae::IdPooling::kWholeLatent : eqvae::IdPooling::kPerSite, id_points, ctx.ae.config.seed);
      const auto est = eqvae::twonn_intrinsic_dimension(cloud);
      emit({{"id", est.id}, {"n_points", est.n_points}, {"discarded_pairs", est.discarded_pairs},
            {"pooling", whole_latent ? "whole_latent" : "per_site"}},
           id_args.out);
    } else if (pca->parsed()) {
      auto ctx = load_context(pca_args);
      const std::string dir = pca_args.out.empty() ? "viz" : pca_args.out;
      eqvae::write_pca_maps(ctx.ae.model, ctx.val, dir, pca_count);
      std::cout << "wrote PCA maps to " << dir << "\n";
    } else if (probe->parsed()) {
      auto ctx = load_context(probe_args);
      auto feat = eqvae::resolve_feature_net(ctx.ae.config, ctx.data);
      emit(eqvae::probe_latent_transforms(ctx.ae.model, ctx.val, feat), probe_args.out);
    } else if (build->parsed() || tlg->parsed() || egen->parsed()) {
      EvalArgs ea;
      ea.checkpoint = ckpt;
      ea.dataset = lg_dataset;
      auto ctx = load_context(ea);
      if (build->parsed()) {
        const auto ds = eqvae::build_latent_dataset(ckpt, ctx.data.train);
        ds.save(build_out);
        std::cout << "wrote " << build_out << ".bin/.json (" << ds.latents.size(0) << " latents)\n";
      } else {
        auto feat = eqvae::resolve_feature_net(ctx.ae.config, ctx.data);
        const auto ds = eqvae::LatentDataset::load(latents_stem);
        if (tlg->parsed()) {
          emit(eqvae::run_latentgen(ckpt, ds, ctx.data.val, feat, lg, gen_out), "");
        } else {
          auto model = eqvae::load_denoiser(denoiser_path);
          auto& predictor = static_cast<eqvae::NoisePredictor&>(*model);
          emit(eqvae::score_generation(ctx.ae.model, predictor, ds, ctx.data.val, feat, lg.samples, lg.sample_seed),
               gen_out);
        }
      }
    } else if (cmp->parsed()) {
      const auto j = eqvae::compare_runs(run_a, run_b, cmp_out);
      std::cout << "wrote comparison to " << cmp_out << " (" << j["metrics"].size() << " metrics)\n";
    }
  } catch (const eqvae::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
