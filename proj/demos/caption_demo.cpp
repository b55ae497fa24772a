// Trains the toy model on a handful of synthetic clips, then captions them.
// usage: caption_demo [steps] [clips]

#include <cstdio>
#include <filesystem>
#include <string>

#include "evcmf/evcmf.hpp"

using namespace evcmf;

int main(int argc, char** argv) {
  const std::size_t steps = argc > 1 ? std::stoul(argv[1]) : 300;
  const std::size_t clips = argc > 2 ? std::stoul(argv[2]) : 8;
  const auto dir = std::filesystem::temp_directory_path() / "evcmf_demo";
  std::filesystem::remove_all(dir);
  write_synthetic_corpus(dir, SynthSettings{}, clips);
  const auto manifest = dir / "manifest.jsonl";

  std::vector<std::string> captions;
  const auto entries = load_manifest(manifest);
  for (const auto& e : entries)
    if (e.split == "train") captions.insert(captions.end(), e.captions.begin(), e.captions.end());
  const auto vocab = build_vocab(captions);

  auto cfg = toy_preset();
  cfg.train.max_steps = steps;
  cfg.train.learning_rate = 1e-3;  // converges in a few hundred steps; the default 4e-5 needs ~2000
  cfg.train.first_caption_only = true;
  Trainer trainer(cfg, vocab, load_examples(manifest, "train", vocab, cfg.model));
  trainer.run([&](const StepMetrics& m) {
    if (m.step == 1 || m.step % 50 == 0) std::printf("step %4zu  loss %.4f\n", m.step, m.loss);
    return true;
  });

  EvalCorpus corpus;
  for (const auto& e : entries) {
    auto clip = read_clip(resolve_clip_path(manifest, e));
    const auto text = generate_caption(trainer.model(), clip, vocab, 4, 20);
    std::printf("%s [%s]  %s\n", e.video_id.c_str(), e.split.c_str(), text.c_str());
    EvalItem item{e.video_id, tokenize(text), {}};
    for (const auto& c : e.captions) item.references.push_back(tokenize(c));
    corpus.items.push_back(item);
  }
  std::printf("\n%s", score_corpus(corpus).table().c_str());
  return 0;
}
