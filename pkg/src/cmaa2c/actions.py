"""The discrete action set shared by the simulator, shield and learner."""

from enum import IntEnum

K_THROTTLE = 3


class Action(IntEnum):
    KEEP_LANE_SPEED = 0
    CHANGE_LANE_LEFT = 1
    CHANGE_LANE_RIGHT = 2
    BRAKE = 3
    THROTTLE_1 = 4
    THROTTLE_2 = 5
    THROTTLE_3 = 6
    # fallback outside the policy's action set
    EMERGENCY_STOP = 7

    @property
    def is_lane_change(self) -> bool:
        return self in (Action.CHANGE_LANE_LEFT, Action.CHANGE_LANE_RIGHT)

    @property
    def throttle_bin(self) -> int | None:
        """1-based throttle interval index, or None."""
        if Action.THROTTLE_1 <= self <= Action.THROTTLE_3:
            return int(self) - int(Action.THROTTLE_1) + 1
        return None


ACTION_SET: tuple[Action, ...] = tuple(Action(i) for i in range(4 + K_THROTTLE))
N_ACTIONS = len(ACTION_SET)
