#pragma once

#include "pudnet/data.hpp"
#include "pudnet/hypernet.hpp"
#include "pudnet/losses.hpp"
#include "pudnet/targetnet.hpp"

namespace pudnet::testing {

// A few-second meta-training setup: 6 classes of 16×16 images, width-8 target.
struct Tiny {
  data::ImageCorpus corpus;
  target::TargetSpec spec = target::convnet3_spec(1, 8, 8);
  hyper::HyperConfig hyper;
  std::vector<data::TaskGroup> tasks;

  explicit Tiny(std::size_t n_tasks = 6, std::size_t n_way = 3, double clutter = 0.0) {
    data::SyntheticSpec s;
    s.n_classes = 6;
    s.per_class = 30;
    s.seed = 11;
    s.clutter = clutter;
    corpus = data::make_synthetic_corpus(s);
    hyper.p = 4;
    hyper.p_mid = 4;
    hyper.extractor.hidden = {4, 8};
    hyper.extractor.sketch_dim = 8;
    tasks = data::sample_task_groups(corpus, {n_way, 5, 6, n_tasks, 3});
  }

  template <class T>
  hyper::PudNet<T> pudnet(std::uint64_t seed = 1) const {
    Rng rng(seed);
    return hyper::PudNet<T>::init(hyper, spec, rng);
  }

  template <class T>
  losses::FullHead<T> head(std::uint64_t seed = 2) const {
    Rng rng(seed);
    return losses::FullHead<T>::init(spec.embedding_dim, corpus.num_classes(), rng);
  }
};

}  // namespace pudnet::testing
