"""Default prompt templates, one per pipeline role.

The grouping prompt is the exact wording the scoring protocol was defined
with and must not drift; everything else is a versioned default that a
config file may replace (the construction stages were originally driven by
prompts published elsewhere, so these bodies are neutral stand-ins).
"""

from __future__ import annotations

from .gateway import PromptTemplate

GROUP_PROMPT = (
    "Please assume the role of an expert in the field of emotions. We provide "
    "a set of emotions. Please group the emotions, with each group containing "
    "emotions with the same meaning. Directly output the results. The output "
    "format should be a list containing multiple lists."
    "\n\nEmotions: {labels}"
)

PRELABEL_AUDIO_PROMPT = (
    "Listen to the audio of the clip at {media}. Describe every emotion-related "
    "clue in the speaker's voice: tone, pitch, pace, intensity, pauses, and "
    "non-verbal vocalizations. Only report cues relevant to the speaker's "
    "emotional state."
)

PRELABEL_VIDEO_PROMPT = (
    "Watch the video clip at {media}. Describe every emotion-related clue you "
    "can see: facial expression, gaze, gestures, posture, and scene context. "
    "Only report cues relevant to the person's emotional state."
)

RECONCILE_PROMPT = (
    "You are given emotion-related clues from one modality of a video clip, "
    "plus the clip's subtitle (which may be empty or ambiguous).\n"
    "Clues: {clues}\n"
    "Subtitle: {subtitle}\n"
    "Use the clues to resolve how the subtitle should be read emotionally, and "
    "write one consolidated description of the speaker's emotional state."
)

MERGE_PROMPT = (
    "Combine the following observations of one video clip into a single "
    "coherent English description of the person's emotional state. Reference "
    "the supporting evidence from each source.\n"
    "Audio clues: {audio_desc}\n"
    "Visual clues: {video_desc}\n"
    "Subtitle: {subtitle}"
)

DISAMBIGUATE_PROMPT = (
    "The emotion description below may leave the subtitle's emotional reading "
    "ambiguous (irony, understatement, rhetorical questions).\n"
    "Description: {description}\n"
    "Subtitle: {subtitle}\n"
    "Rewrite the description so the subtitle's emotional reading is explicit "
    "and consistent with the described audiovisual clues. Output only the "
    "revised description."
)

TRANSLATE_PROMPT = (
    "Translate the following emotion description into {target_language}. Keep "
    "every emotion word precise; do not add or drop content.\n\n{text}"
)

EXTRACT_LABELS_PROMPT = (
    "Read the following emotion description and output the emotion labels it "
    "supports, as a JSON list of strings. Output only the list.\n\n{description}"
)


def default_templates() -> dict[str, PromptTemplate]:
    """Templates keyed by pipeline role (the reconcile step under 'two_step')."""
    return {
        "group": PromptTemplate("group_emotions", "1", GROUP_PROMPT, "group"),
        "prelabel_audio": PromptTemplate(
            "prelabel_audio", "1", PRELABEL_AUDIO_PROMPT, "prelabel_audio"
        ),
        "prelabel_video": PromptTemplate(
            "prelabel_video", "1", PRELABEL_VIDEO_PROMPT, "prelabel_video"
        ),
        "two_step": PromptTemplate("reconcile_subtitle", "1", RECONCILE_PROMPT, "disambiguate"),
        "merge": PromptTemplate("merge_clues", "1", MERGE_PROMPT, "merge"),
        "disambiguate": PromptTemplate(
            "disambiguate_description", "1", DISAMBIGUATE_PROMPT, "disambiguate"
        ),
        "translate": PromptTemplate("translate_description", "1", TRANSLATE_PROMPT, "translate"),
        "extract_labels": PromptTemplate(
            "extract_labels", "1", EXTRACT_LABELS_PROMPT, "extract_labels"
        ),
    }
