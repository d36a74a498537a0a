// End-to-end exercise of the command-line surface: synth -> train -> eval ->
// bench -> gradcheck, plus determinism and failure-path checks. Takes the CLI
// binary path as argv[1].

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void expect(bool ok, const std::string& what) {
  if (ok) {
    std::cout << "  ok: " << what << "\n";
  } else {
    ++g_failures;
    std::cout << "  FAILED: " << what << "\n";
  }
}

int run(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: cli_pipeline_test <path-to-fcnbnl-cli>\n";
    return 2;
  }
  const std::string cli = argv[1];
  const fs::path work = fs::temp_directory_path() / "fcnbnl_cli_pipeline";
  fs::remove_all(work);
  fs::create_directories(work);

  const std::string synth_flags =
      " --synth.k 2 --synth.images_per_class 6 --synth.image_size 32 --synth.motif_size 10"
      " --synth.noise_level 0.05";
  // Base 36 keeps the short side of 2:1 cut images above the receptive field
  // so the full perturbation sweep can run on this checkpoint.
  const std::string tiny_train_flags =
      synth_flags +
      " --pyramid.base 36 --pyramid.factors 1.0,1.25 --train.epochs 2 --train.batch_size 4 --train.lr 0.2";
  const std::string quiet = " > /dev/null 2>&1";

  std::cout << "cli pipeline under " << work << "\n";

  // synth: deterministic dataset tree + manifest
  expect(run(cli + " synth --seed 5 --out " + (work / "s1").string() + synth_flags + quiet) == 0, "synth exits 0");
  expect(fs::exists(work / "s1/dataset/class_000") && fs::exists(work / "s1/dataset/class_001"),
         "synth writes one directory per class");
  expect(fs::exists(work / "s1/manifest.txt"), "synth writes a manifest");
  expect(run(cli + " synth --seed 5 --out " + (work / "s2").string() + synth_flags + quiet) == 0, "synth rerun");
  bool trees_equal = true;
  for (const auto& e : fs::recursive_directory_iterator(work / "s1/dataset")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), work / "s1/dataset");
    trees_equal = trees_equal && read_bytes(e.path()) == read_bytes(work / "s2/dataset" / rel);
  }
  expect(trees_equal, "same seed reproduces a byte-identical dataset tree");

  // train: checkpoint + history, deterministic across reruns
  expect(run(cli + " train --seed 9 --out " + (work / "t1").string() + tiny_train_flags + quiet) == 0,
         "train exits 0");
  expect(fs::exists(work / "t1/model.ckpt") && fs::exists(work / "t1/history.csv") && fs::exists(work / "t1/run.log"),
         "train writes checkpoint, history and log");
  expect(run(cli + " train --seed 9 --out " + (work / "t2").string() + tiny_train_flags + quiet) == 0,
         "train rerun");
  expect(read_bytes(work / "t1/model.ckpt") == read_bytes(work / "t2/model.ckpt"),
         "same config and seed give byte-identical checkpoints");
  {
    std::string history = read_text(work / "t1/history.csv");
    expect(history.rfind("epoch,loss,lr", 0) == 0, "history csv carries the documented header");
  }

  // train on a dataset directory (exercises the on-disk layout route)
  expect(run(cli + " train --seed 9 --out " + (work / "t3").string() + " --dataset.path " +
             (work / "s1/dataset").string() +
             " --pyramid.base 36 --pyramid.factors 1.0,1.25 --train.epochs 1 --train.batch_size 4 --train.lr 0.1" +
             quiet) == 0,
         "train consumes a dataset directory");

  // eval: original kind, then the full sweep
  expect(run(cli + " eval --seed 9 --out " + (work / "e1").string() + " --eval.checkpoint " +
             (work / "t1/model.ckpt").string() + synth_flags + quiet) == 0,
         "eval exits 0");
  expect(fs::exists(work / "e1/accuracy.csv") && fs::exists(work / "e1/confusion_original.csv"),
         "eval writes accuracy and confusion CSVs");
  expect(run(cli + " eval --seed 9 --out " + (work / "e2").string() + " --eval.checkpoint " +
             (work / "t1/model.ckpt").string() + synth_flags + quiet) == 0,
         "eval rerun");
  expect(read_bytes(work / "e1/accuracy.csv") == read_bytes(work / "e2/accuracy.csv"),
         "evaluating twice yields identical reports");

  // Perturbation sweep needs headroom above the receptive field for the cuts.
  expect(run(cli + " eval --seed 9 --out " + (work / "e3").string() + " --eval.checkpoint " +
             (work / "t1/model.ckpt").string() + synth_flags + " --eval.perturb all" + quiet) == 0,
         "eval --eval.perturb all exits 0");
  int confusion_files = 0;
  for (const auto& e : fs::directory_iterator(work / "e3"))
    if (e.path().filename().string().rfind("confusion_", 0) == 0) ++confusion_files;
  expect(confusion_files == 8, "perturbation sweep writes one confusion per kind");
  expect(read_text(work / "e3/accuracy.csv").find("upside_down") != std::string::npos,
         "sweep covers upside_down");

  // bench: csv with one row per mode per count
  expect(run(cli + " bench --seed 3 --out " + (work / "b1").string() + synth_flags +
             " --bench.counts 4,9 --bench.reps 5 --bench.patch_sizes 12,16 --bench.images 2" + quiet) == 0,
         "bench exits 0");
  {
    std::string timing = read_text(work / "b1/timing.csv");
    expect(timing.rfind("count,mode,median_seconds,std_seconds,reps", 0) == 0, "timing csv header");
    expect(timing.find(",patch,") != std::string::npos && timing.find(",fc,") != std::string::npos,
           "timing csv covers both modes");
  }

  // gradcheck: exit code reflects pass/fail
  expect(run(cli + " gradcheck --seed 1 --out " + (work / "g1").string() + " --gradcheck.trials 2" + quiet) == 0,
         "gradcheck passes at default tolerances");
  expect(run(cli + " gradcheck --seed 1 --out " + (work / "g2").string() +
             " --gradcheck.trials 2 --gradcheck.tolerance 1e-15" + quiet) != 0,
         "gradcheck exits nonzero when the tolerance is exceeded");

  // validation failures: nonzero exit, no partial outputs
  expect(run(cli + " train --seed 1 --out " + (work / "bad1").string() + tiny_train_flags +
             " --train.epochs 0" + quiet) != 0,
         "epochs=0 is rejected");
  expect(!fs::exists(work / "bad1/model.ckpt"), "no partial outputs after a rejected config");
  expect(run(cli + " train --seed 1 --out " + (work / "bad2").string() +
             " --dataset.path /nonexistent/dataset" + quiet) != 0,
         "missing dataset path is an error");
  expect(run(cli + " eval --seed 1 --out " + (work / "bad3").string() + " --eval.checkpoint " +
             (work / "t1/history.csv").string() + synth_flags + quiet) != 0,
         "a non-checkpoint file is rejected");

  std::cout << (g_failures == 0 ? "cli pipeline: all checks passed\n"
                                : "cli pipeline: " + std::to_string(g_failures) + " checks FAILED\n");
  return g_failures == 0 ? 0 : 1;
}
