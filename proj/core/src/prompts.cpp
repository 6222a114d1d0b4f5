#include "vlab/prompts.hpp"

namespace vlab::eval {

const char* task_name(Task t) {
  switch (t) {
    case Task::Caption: return "caption";
    case Task::ImageQa: return "image_qa";
    case Task::VideoQa: return "video_qa";
  }
  return "?";
}

Task task_from_name(const std::string& name) {
  if (name == "caption") return Task::Caption;
  if (name == "image_qa") return Task::ImageQa;
  if (name == "video_qa") return Task::VideoQa;
  throw ContractError("unknown task '" + name + "'");
}

std::string render_prompt(Task task, const std::string& question,
                          const std::vector<std::pair<std::string, std::string>>& pseudo) {
  if (task == Task::Caption) {
    check(pseudo.empty(), "render_prompt: captioning takes no pseudo examples");
    return "Describe the following: <VIS> :";
  }
  check(!question.empty(), "render_prompt: question required for QA tasks");
  std::string q = question;
  while (!q.empty() && (q.back() == '?' || q.back() == ' ')) q.pop_back();
  std::string out = "Answer the question given the images.\n\n";
  for (const auto& [pq, pa] : pseudo) {
    out += "Given\nQuestion: " + pq + "\nAnswer: " + pa + "\n\n";
  }
  out += "Given <VIS>\nQuestion: " + q + "?\n";
  out += task == Task::VideoQa ? "Answer in exactly one word:" : "Answer:";
  return out;
}

std::pair<std::string, std::string> split_at_vis(const std::string& prompt) {
  static const std::string kMarker = "<VIS>";
  const auto pos = prompt.find(kMarker);
  check(pos != std::string::npos, "prompt has no <VIS> marker");
  return {prompt.substr(0, pos), prompt.substr(pos + kMarker.size())};
}

}  // namespace vlab::eval
