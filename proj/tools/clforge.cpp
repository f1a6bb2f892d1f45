// Copyright 2026 The clforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "clforge/harness.hpp"
#include "clforge/kernels.hpp"

int main(int argc, char** argv) {
  using namespace clforge;
  CLI::App app{"clforge: continual-learning experiments with weight averaging"};
  app.require_subcommand(1);

  std::string config;
  auto* run = app.add_subcommand("run", "train every strategy x seed and write reports");
  run->add_option("config", config, "experiment JSON")->required();

  AverageArgs avg_args;
  double eta = 0.0;
  int task_index = 0;
  std::string schedule;
  auto* average = app.add_subcommand("average", "average two checkpoints");
  average->add_option("old", avg_args.old_checkpoint, "checkpoint before adaptation")->required();
  average->add_option("adapted", avg_args.adapted_checkpoint, "adapted checkpoint")->required();
  average->add_option("-o,--output", avg_args.output, "output checkpoint")->required();
  auto* eta_opt = average->add_option("--eta", eta, "weight of the adapted model");
  auto* task_opt = average->add_option("--task-index", task_index, "index t of the new task");
  auto* sched_opt = average->add_option("--schedule", schedule, "harmonic or a constant");
  eta_opt->excludes(task_opt);

  MetricsArgs met_args;
  std::string baseline, json_out;
  auto* metrics = app.add_subcommand("metrics", "AVG, BWT and FWT of a WER matrix CSV");
  metrics->add_option("wer_csv", met_args.wer_csv, "WER matrix CSV")->required();
  auto* base_opt = metrics->add_option("baseline_csv", baseline, "Fine-Tuning WER matrix CSV");
  metrics->add_flag("--fwt", met_args.require_fwt, "fail unless FWT can be computed");
  auto* json_opt = metrics->add_option("--json", json_out, "where to write the JSON record");

  std::string gen_config, gen_dir;
  std::uint64_t gen_seed = 1;
  auto* gen = app.add_subcommand("gen-tasks", "write the datasets of a suite");
  gen->add_option("config", gen_config, "experiment JSON")->required();
  gen->add_option("-o,--output", gen_dir, "output directory")->required();
  gen->add_option("--seed", gen_seed, "run seed (when the suite has no fixed seed)");

  std::string ckpt, dataset;
  int eval_task = 0;
  auto* eval = app.add_subcommand("eval", "WER of a checkpoint on a dataset file");
  eval->add_option("checkpoint", ckpt, "checkpoint")->required();
  eval->add_option("dataset", dataset, "dataset file")->required();
  auto* eval_task_opt = eval->add_option("--task", eval_task, "task head to use");

  bool show_isa = false;
  app.add_flag("--isa", show_isa, "print the selected kernel variant");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_usage;
  }
  if (show_isa) std::cerr << "kernels: " << kernels::to_string(kernels::active_isa()) << "\n";

  if (*run) return cmd_run(config, std::cout, std::cerr);
  if (*average) {
    if (*eta_opt) avg_args.eta = eta;
    if (*task_opt) avg_args.task_index = task_index;
    if (*sched_opt) avg_args.schedule = schedule;
    return cmd_average(avg_args, std::cout, std::cerr);
  }
  if (*metrics) {
    if (*base_opt) met_args.baseline_csv = baseline;
    if (*json_opt) met_args.json_output = json_out;
    return cmd_metrics(met_args, std::cout, std::cerr);
  }
  if (*gen) return cmd_gen_tasks(gen_config, gen_dir, gen_seed, std::cout, std::cerr);
  if (*eval) {
    std::optional<int> task;
    if (*eval_task_opt) task = eval_task;
    return cmd_eval(ckpt, dataset, task, std::cout, std::cerr);
  }
  return exit_usage;
}
