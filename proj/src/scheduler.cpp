#include "ilog/scheduler.hpp"
#include "ilog/crypto.hpp"
#include "ilog/error.hpp"

#include <algorithm>
#include <cstring>
#include <set>

namespace ilog {

std::string_view to_string(TaskKind k) {
    return k == TaskKind::episode ? "episode" : "mood_prompt";
}

std::optional<TaskKind> task_kind_from_string(std::string_view s) {
    if (s == "episode") return TaskKind::episode;
    if (s == "mood_prompt") return TaskKind::mood_prompt;
    return std::nullopt;
}

std::string_view to_string(TaskOutcome o) {
    switch (o) {
        case TaskOutcome::answered: return "answered";
        case TaskOutcome::backlog_evicted: return "backlog_evicted";
        case TaskOutcome::window_expired: return "window_expired";
        case TaskOutcome::study_ended: return "study_ended";
    }
    return "?";
}

std::optional<TaskOutcome> task_outcome_from_string(std::string_view s) {
    for (auto o : {TaskOutcome::answered, TaskOutcome::backlog_evicted, TaskOutcome::window_expired,
                   TaskOutcome::study_ended})
        if (to_string(o) == s) return o;
    return std::nullopt;
}

std::vector<Question> task_questions(TaskKind kind, const StudyConfig& config) {
    Question mood{CodebookId::mood, "What is your mood?", false};
    if (kind == TaskKind::mood_prompt) return {mood};
    std::vector<Question> q = {
        {CodebookId::activity, "What are you doing?", false},
        {CodebookId::location, "Where are you?", false},
        {CodebookId::transport, "How are you travelling?", true},
        {CodebookId::with_whom, "Who is with you?", false},
    };
    if (config.mood_per_episode) q.push_back(mood);
    return q;
}

namespace {

Id128 derive_task_id(const Id128& salt, TaskKind kind, TimestampMs episode_start, TimestampMs emit_at) {
    std::uint8_t buf[16 + 1 + 16];
    std::memcpy(buf, salt.bytes.data(), 16);
    buf[16] = kind == TaskKind::episode ? 'E' : 'M';
    for (int i = 0; i < 8; ++i) {
        buf[17 + i] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(episode_start) >> (8 * i));
        buf[25 + i] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(emit_at) >> (8 * i));
    }
    auto digest = crypto::sha256(buf);
    Id128 id;
    std::copy_n(digest.begin(), 16, id.bytes.begin());
    return id;
}

[[noreturn]] void invalid_answer(const std::string& what) {
    throw Error(Errc::invalid_answer, what);
}

}  // namespace

std::vector<DiaryTask> generate_timeline(const StudyConfig& config, int tz_offset_min,
                                         const Id128& salt) {
    std::vector<DiaryTask> out;
    const auto res_ms = static_cast<TimestampMs>(config.diary_resolution_min) * kMsPerMinute;
    const auto slots = 1440 / config.diary_resolution_min;
    const auto shift = static_cast<TimestampMs>(tz_offset_min) * kMsPerMinute;
    auto episode_q = task_questions(TaskKind::episode, config);
    auto mood_q = task_questions(TaskKind::mood_prompt, config);
    out.reserve(static_cast<std::size_t>(config.span_days()) *
                (slots + config.mood_prompts.size()));

    for (auto day = config.start; day <= config.end; day = day.next()) {
        const auto day_start = day.start_ms() - shift;
        for (int k = 0; k < slots; ++k) {
            DiaryTask t;
            t.kind = TaskKind::episode;
            t.episode_start = day_start + k * res_ms;
            t.emit_at = t.episode_start + res_ms;
            t.questions = episode_q;
            out.push_back(std::move(t));
        }
        for (auto tod : config.mood_prompts) {
            DiaryTask t;
            t.kind = TaskKind::mood_prompt;
            t.emit_at = day_start + tod.minutes * kMsPerMinute;
            t.episode_start = t.emit_at;
            t.questions = mood_q;
            out.push_back(std::move(t));
        }
    }
    for (auto& t : out) {
        t.task_id = derive_task_id(salt, t.kind, t.episode_start, t.emit_at);
        if (config.reply_window_min)
            t.expiry = t.emit_at + static_cast<TimestampMs>(*config.reply_window_min) * kMsPerMinute;
    }
    std::stable_sort(out.begin(), out.end(), [](const DiaryTask& a, const DiaryTask& b) {
        if (a.emit_at != b.emit_at) return a.emit_at < b.emit_at;
        if (a.kind != b.kind) return a.kind < b.kind;
        return a.episode_start < b.episode_start;
    });
    return out;
}

void validate_answer_items(const DiaryTask& task, const std::vector<AnswerItem>& items,
                           const StudyConfig& config) {
    std::set<CodebookId> seen;
    std::optional<int> activity;
    for (const auto& item : items) {
        auto name = std::string(to_string(item.codebook));
        if (!seen.insert(item.codebook).second) invalid_answer(name + " answered twice");
        const auto& cb = config.codebook(item.codebook);
        if (!cb.contains(item.code))
            invalid_answer(name + " code " + std::to_string(item.code) + " outside codebook");
        if (item.open_text && (!cb.allows_open_text || cb.open_code() != item.code))
            invalid_answer(name + " does not accept open text for code " + std::to_string(item.code));
        if (item.codebook == CodebookId::activity) activity = item.code;
    }
    std::set<CodebookId> required;
    for (const auto& q : task.questions) {
        if (!q.conditional) required.insert(q.codebook);
        else if (q.codebook == CodebookId::transport && activity == config.travelling_code)
            required.insert(q.codebook);
    }
    if (seen != required) {
        std::string want;
        for (auto id : required) want += std::string(want.empty() ? "" : ",") + std::string(to_string(id));
        invalid_answer("answer must cover exactly {" + want + "}");
    }
}

TaskQueue::TaskQueue(int cap, std::optional<std::int64_t> reply_window_ms)
    : cap_(cap), reply_window_ms_(reply_window_ms) {
    if (cap < 1) throw Error(Errc::validation_error, "backlog cap must be >= 1", "backlog_cap");
}

TaskQueue TaskQueue::for_study(const StudyConfig& config) {
    std::optional<std::int64_t> window;
    if (config.reply_window_min) window = *config.reply_window_min * kMsPerMinute;
    return TaskQueue(config.backlog_cap, window);
}

void TaskQueue::enqueue(DiaryTask task) {
    if (outcomes_.count(task.task_id) || is_pending(task.task_id))
        throw Error(Errc::duplicate_task, "task " + task.task_id.hex() + " already queued");
    pending_.push_back(std::move(task));
    while (static_cast<int>(pending_.size()) > cap_)
        expire(pending_.begin(), TaskOutcome::backlog_evicted);
}

std::deque<DiaryTask>::iterator TaskQueue::expire(std::deque<DiaryTask>::iterator it,
                                                  TaskOutcome reason) {
    expired_.push_back({it->task_id, reason});
    outcomes_[it->task_id] = reason;
    return pending_.erase(it);
}

bool TaskQueue::is_pending(const Id128& id) const {
    return std::any_of(pending_.begin(), pending_.end(),
                       [&](const DiaryTask& t) { return t.task_id == id; });
}

std::optional<TaskOutcome> TaskQueue::outcome(const Id128& id) const {
    if (auto it = outcomes_.find(id); it != outcomes_.end()) return it->second;
    return std::nullopt;
}

std::optional<TaskQueue::Delivery> TaskQueue::delivery(const Id128& id) const {
    if (auto it = deliveries_.find(id); it != deliveries_.end()) return it->second;
    return std::nullopt;
}

std::map<TaskOutcome, std::size_t> TaskQueue::outcome_counts() const {
    std::map<TaskOutcome, std::size_t> counts;
    for (const auto& [_, o] : outcomes_) ++counts[o];
    return counts;
}

TaskQueue::Accepted TaskQueue::accept_answer(const Id128& task_id, const DiaryAnswer& answer,
                                             TimestampMs notified_at, const StudyConfig& config) {
    auto it = std::find_if(pending_.begin(), pending_.end(),
                           [&](const DiaryTask& t) { return t.task_id == task_id; });
    if (it == pending_.end()) throw Error(Errc::unknown_task, "task " + task_id.hex() + " not pending");
    if (answer.task_id != task_id) invalid_answer("answer refers to a different task");
    if (answer.answered_at_start > answer.answered_at_end)
        invalid_answer("answered_at_start after answered_at_end");
    if (answer.answered_at_start < notified_at) invalid_answer("answer opened before notification");

    if (config.reply_window_min &&
        answer.answered_at_end > notified_at + *config.reply_window_min * kMsPerMinute) {
        expire(it, TaskOutcome::window_expired);
        throw Error(Errc::window_expired, "reply window of " +
                                              std::to_string(*config.reply_window_min) +
                                              " min exceeded");
    }

    Accepted out;
    out.answer = answer;
    if (answer.same_as_previous && answer.answers.empty()) {
        if (it->kind != TaskKind::episode || !previous_episode_)
            invalid_answer("no previous episode answer to copy");
        out.answer.answers = *previous_episode_;
    }
    validate_answer_items(*it, out.answer.answers, config);

    auto d = delivery(task_id);
    out.telemetry = {task_id, notified_at, answer.answered_at_start - notified_at,
                     answer.answered_at_end - answer.answered_at_start, d && d->offline};
    if (it->kind == TaskKind::episode) previous_episode_ = out.answer.answers;
    outcomes_[task_id] = TaskOutcome::answered;
    ++answered_;
    pending_.erase(it);
    return out;
}

std::vector<DiaryTask> TaskQueue::deliver_pending(TimestampMs now,
                                                  std::optional<TimestampMs> offline_since) {
    if (reply_window_ms_) {
        for (auto it = pending_.begin(); it != pending_.end();) {
            auto d = deliveries_.find(it->task_id);
            if (d != deliveries_.end() && now > d->second.first_delivered_at + *reply_window_ms_)
                it = expire(it, TaskOutcome::window_expired);
            else
                ++it;
        }
    }
    std::vector<DiaryTask> out;
    for (const auto& t : pending_) {
        if (t.emit_at > now) continue;
        if (!deliveries_.count(t.task_id))
            deliveries_[t.task_id] = {now, offline_since && t.emit_at >= *offline_since};
        out.push_back(t);
    }
    return out;
}

void TaskQueue::end_study() {
    while (!pending_.empty()) expire(pending_.begin(), TaskOutcome::study_ended);
}

void TaskQueue::restore_pending(DiaryTask task, std::optional<Delivery> delivery) {
    if (delivery) deliveries_[task.task_id] = *delivery;
    pending_.push_back(std::move(task));
}

void TaskQueue::restore_outcome(const Id128& id, TaskOutcome outcome) {
    outcomes_[id] = outcome;
    if (outcome == TaskOutcome::answered) ++answered_;
    else expired_.push_back({id, outcome});
}

}  // namespace ilog
