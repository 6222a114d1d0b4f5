#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vlab/common.hpp"

namespace vlab::eval {

enum class Task { Caption, ImageQa, VideoQa };

const char* task_name(Task t);
Task task_from_name(const std::string& name);

// Renders the task prompt. "<VIS>" marks where the visual prefix is spliced.
// pseudo holds text-only question/answer exemplars (zero-shot VQA prompting);
// it must be empty for captioning. The question's trailing '?' is normalized
// away before rendering so the template always emits exactly one.
std::string render_prompt(Task task, const std::string& question = "",
                          const std::vector<std::pair<std::string, std::string>>& pseudo = {});

// Splits rendered prompt text at the visual marker.
std::pair<std::string, std::string> split_at_vis(const std::string& prompt);

}  // namespace vlab::eval
